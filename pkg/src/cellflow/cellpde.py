"""Finite-volume solves of the cell problems and super-solution residual audits.

All operators are ``-Lap u + A v . grad u (+ lam u)`` discretised in flux form
on a vertex-centred grid of spacing ``dx = 2 pi / n``.  The advective flux
through each control-volume face is computed exactly from the stream
function (``A`` times the difference of ``h`` at the face end points), so
the discrete velocity field is exactly divergence free and constants lie in
both kernels of the periodic operator.

Face discretisations of the advected value:

``"central"``
    arithmetic mean; second order, used for the periodic corrector whose
    Richardson check needs it.
``"upwind"``
    first-order donor cell; monotone.
``"sg"``
    exponentially fitted (Scharfetter-Gummel) weights ``B(z) = z/(e^z - 1)``;
    monotone like upwind and much less diffusive across streamlines, used
    for the Dirichlet solves whose maximum principle must hold.

Linear systems are solved by GMRES with an incomplete-LU preconditioner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import special
from scipy.interpolate import RegularGridInterpolator

from .flowfield import HALF_PI, FlowParams, corner_gamma0

EDGES = ("S", "N", "W", "E")
SCHEMES = ("central", "upwind", "sg")


class SolverError(RuntimeError):
    """Krylov solve failed to reach its tolerance."""

    def __init__(self, msg, residual):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PeriodicGrid:
    """Vertex-centred grid with ``n`` nodes per axis on ``[0, 2 pi)``."""

    n: int

    def __post_init__(self):
        if self.n < 64 or self.n % 2:
            raise ValueError(f"grid resolution must be even and >= 64, got {self.n}")

    @property
    def dx(self) -> float:
        return 2.0 * math.pi / self.n

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    @classmethod
    def for_peclet(cls, A: float) -> "PeriodicGrid":
        """Resolution policy ``n = max(128, ceil(8 sqrt(A)))``, rounded up to even."""
        n = max(128, math.ceil(8.0 * math.sqrt(max(A, 0.0))))
        return cls(n + (n % 2))


@dataclass
class CellField:
    """Nodal values of a scalar field with the coordinates of the nodes."""

    values: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    name: str
    meta: dict = field(default_factory=dict)

    def records(self):
        """Flat ``(i, j, x1, x2, value)`` rows."""
        for i, a in enumerate(self.x1):
            for j, b in enumerate(self.x2):
                yield i, j, float(a), float(b), float(self.values[i, j])

    def interpolator(self):
        return RegularGridInterpolator((self.x1, self.x2), self.values)


@dataclass
class SolveInfo:
    iterations: int
    residual_max: float
    relative_residual: float
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# assembly


def bernoulli(z):
    """``z / (exp(z) - 1)`` with the removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    out = zs / np.expm1(zs)
    return np.where(small, 1.0 - 0.5 * z, out)


def _face_weights(F, scheme):
    # flux from node a to its neighbour b through a face with outward
    # transport F is d * u_a - o * u_b
    if scheme == "central":
        return 1.0 + 0.5 * F, 1.0 - 0.5 * F
    if scheme == "upwind":
        return 1.0 + np.maximum(F, 0.0), 1.0 + np.maximum(-F, 0.0)
    if scheme == "sg":
        return bernoulli(-F), bernoulli(F)
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def _stream(a, b):
    return np.sin(a) * np.sin(b)


def _face_transport(A, X, Y, dx):
    """Outward advective transport through the east and north faces of each node."""
    hx = 0.5 * dx
    FE = A * (_stream(X + hx, Y - hx) - _stream(X + hx, Y + hx))
    FN = A * (_stream(X + hx, Y + hx) - _stream(X - hx, Y + hx))
    return FE, FN


def periodic_operator(A: float, grid: PeriodicGrid, scheme: str = "central") -> sp.csr_matrix:
    """Flux-form operator ``dx^2 (-Lap + A v . grad)`` on the periodic grid."""
    n, dx = grid.n, grid.dx
    X, Y = np.meshgrid(grid.x, grid.x, indexing="ij")
    FE, FN = _face_transport(A, X, Y, dx)
    dE, oE = _face_weights(FE, scheme)
    dN, oN = _face_weights(FN, scheme)
    idx = np.arange(n * n).reshape(n, n)
    east = np.roll(idx, -1, axis=0)
    north = np.roll(idx, -1, axis=1)
    rows, cols, vals = [], [], []
    for d, o, nb in ((dE, oE, east), (dN, oN, north)):
        a, b = idx.ravel(), nb.ravel()
        d, o = d.ravel(), o.ravel()
        # face flux d u_a - o u_b leaves a and enters b
        rows += [a, a, b, b]
        cols += [a, b, a, b]
        vals += [d, -o, -d, o]
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n * n, n * n))
    L.sum_duplicates()
    return L


def dirichlet_operator(A: float, m: int, scheme: str = "sg", lam: float = 0.0):
    """Flux-form operator on the interior nodes of ``[0, pi]^2`` with ``m`` intervals.

    Returns
    -------
    L : csr_matrix
        ``dx^2 (-Lap + A v . grad + lam)`` restricted to interior nodes.
    couple : callable
        ``couple(g)`` maps boundary values ``g`` (an ``(m+1, m+1)`` array that
        is only read on the boundary) to the right-hand-side contribution.
    x : ndarray
        Node coordinates along each axis.
    """
    dx = math.pi / m
    x = np.arange(m + 1) * dx
    X, Y = np.meshgrid(x, x, indexing="ij")
    FE, FN = _face_transport(A, X, Y, dx)
    dE, oE = _face_weights(FE, scheme)
    dN, oN = _face_weights(FN, scheme)
    ni = m - 1
    idx = -np.ones((m + 1, m + 1), dtype=np.int64)
    idx[1:m, 1:m] = np.arange(ni * ni).reshape(ni, ni)
    I, J = np.meshgrid(np.arange(1, m), np.arange(1, m), indexing="ij")
    r = idx[I, J].ravel()
    rows, cols, vals = [r], [r], [np.full(r.size, lam * dx * dx)]
    bnd = []
    # outgoing flux of node (I, J) through each face: d u_self - o u_nb
    faces = (
        (dE[I, J], oE[I, J], I + 1, J),
        (dN[I, J], oN[I, J], I, J + 1),
        (oE[I - 1, J], dE[I - 1, J], I - 1, J),
        (oN[I, J - 1], dN[I, J - 1], I, J - 1),
    )
    for d, o, ii, jj in faces:
        d, o = d.ravel(), o.ravel()
        nb = idx[ii, jj].ravel()
        inside = nb >= 0
        rows += [r, r[inside]]
        cols += [r, nb[inside]]
        vals += [d, -o[inside]]
        bnd.append((r[~inside], o[~inside], ii.ravel()[~inside], jj.ravel()[~inside]))
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ni * ni, ni * ni))
    L.sum_duplicates()

    def couple(g):
        rhs = np.zeros(ni * ni)
        for rr, o, ii, jj in bnd:
            np.add.at(rhs, rr, o * g[ii, jj])
        return rhs

    return L, couple, x


def _krylov(L, rhs, rtol=1e-10, ilu=None, restart=50, maxiter=400):
    import time

    t0 = time.perf_counter()
    if ilu is None:
        ilu = spla.spilu(L.tocsc(), drop_tol=1e-4, fill_factor=20)
    M = spla.LinearOperator(L.shape, ilu.solve)
    count = [0]

    def cb(_):
        count[0] += 1

    u, status = spla.gmres(L, rhs, rtol=rtol, atol=0.0, restart=restart, maxiter=maxiter, M=M,
                           callback=cb, callback_type="pr_norm")
    res = L @ u - rhs
    bn = float(np.linalg.norm(rhs)) or 1.0
    rel = float(np.linalg.norm(res)) / bn
    info = SolveInfo(count[0], float(np.abs(res).max()), rel, time.perf_counter() - t0)
    if status != 0 and rel > 10 * rtol:
        raise SolverError("GMRES did not converge", rel)
    return u, info, ilu


# ---------------------------------------------------------------------------
# periodic corrector


def _quarter_energy(a, b, n):
    """Sum of face-difference products over the quarter cell ``(0, pi)^2``."""
    k = n // 2
    da1 = np.roll(a, -1, axis=0) - a
    db1 = np.roll(b, -1, axis=0) - b
    da2 = np.roll(a, -1, axis=1) - a
    db2 = np.roll(b, -1, axis=1) - b
    w = np.ones(k + 1)
    w[0] = w[-1] = 0.5
    # x1-edges (i, j)-(i+1, j): i in [0, k), j in [0, k] with half weight on the boundary lines
    e1 = (da1[:k, : k + 1] * db1[:k, : k + 1] * w[None, :]).sum()
    e2 = (da2[: k + 1, :k] * db2[: k + 1, :k] * w[:, None]).sum()
    return e1 + e2


def solve_chi(A: float, grid: PeriodicGrid | None = None, scheme: str = "central",
              rtol: float = 1e-10):
    """Periodic corrector ``-Lap chi + A v . grad chi = -A v`` and ``D_eff``.

    ``D_eff = 2 I + (2 / pi^2) int_{(0, pi)^2} grad chi_i . grad chi_j``,
    with the integral evaluated as the face-difference energy of the grid.

    Returns
    -------
    chi1, chi2 : CellField
        Zero-mean correctors.
    D : ndarray, shape (2, 2)
    info : list of SolveInfo
        Residuals are for the unpinned discrete system.
    """
    if A < 0:
        raise ValueError("A must be >= 0")
    grid = grid or PeriodicGrid.for_peclet(A)
    n, dx = grid.n, grid.dx
    X, Y = np.meshgrid(grid.x, grid.x, indexing="ij")
    if A == 0:
        z = np.zeros((n, n))
        info = [SolveInfo(0, 0.0, 0.0)] * 2
        return (CellField(z, grid.x, grid.x, "chi1", {"A": A, "n": n}),
                CellField(z.copy(), grid.x, grid.x, "chi2", {"A": A, "n": n}),
                2.0 * np.eye(2), info)
    L = periodic_operator(A, grid, scheme)
    # cell averages of -A v over each control volume
    s = (math.sin(0.5 * dx) / (0.5 * dx)) ** 2
    v1 = -np.sin(X) * np.cos(Y)
    v2 = np.cos(X) * np.sin(Y)
    # pin node 0: constants span both kernels, so the reduced system is consistent
    P = L.tolil()
    P.rows[0] = [0]
    P.data[0] = [1.0]
    P = P.tocsr()
    fields, infos, ilu = [], [], None
    for comp, v in (("chi1", v1), ("chi2", v2)):
        rhs = (-A * v * s * dx * dx).ravel()
        rhs_p = rhs.copy()
        rhs_p[0] = 0.0
        u, info, ilu = _krylov(P, rhs_p, rtol=rtol, ilu=ilu)
        u -= u.mean()
        res = L @ u - rhs
        info.residual_max = float(np.abs(res).max())
        info.relative_residual = float(np.linalg.norm(res) / np.linalg.norm(rhs))
        fields.append(CellField(u.reshape(n, n), grid.x, grid.x, comp,
                                {"A": A, "n": n, "scheme": scheme}))
        infos.append(info)
    D = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            D[i, j] = 2.0 * (i == j) + (2.0 / math.pi**2) * _quarter_energy(
                fields[i].values, fields[j].values, n)
    return fields[0], fields[1], D, infos


@dataclass
class RichardsonReport:
    A: float
    n: int
    D_coarse: float
    D_fine: float
    rel_diff: float
    under_resolved: bool
    D_matrix: np.ndarray
    residual_max: float


def deff_richardson(A: float, grid: PeriodicGrid | None = None, tol: float = 0.02,
                    scheme: str = "central") -> RichardsonReport:
    """``D_eff,11`` at resolutions ``n`` and ``2n`` with the under-resolution flag."""
    grid = grid or PeriodicGrid.for_peclet(A)
    _, _, Dc, ic = solve_chi(A, grid, scheme)
    _, _, Df, inf_ = solve_chi(A, PeriodicGrid(2 * grid.n), scheme)
    rel = abs(Df[0, 0] - Dc[0, 0]) / abs(Df[0, 0])
    resid = max(i.residual_max for i in ic + inf_)
    return RichardsonReport(A, grid.n, float(Dc[0, 0]), float(Df[0, 0]), float(rel),
                            bool(rel >= tol), Df, resid)


# ---------------------------------------------------------------------------
# Dirichlet problems on the cell (0, pi)^2


def _cell_m(grid: PeriodicGrid) -> int:
    return grid.n // 2


def solve_exit_probability(A: float, edge: str, grid: PeriodicGrid | None = None,
                           scheme: str = "sg", rtol: float = 1e-10) -> CellField:
    """Probability of leaving ``(0, pi)^2`` through ``edge``.

    Solves ``-Lap zeta + A v . grad zeta = 0`` with ``zeta = 1`` on the open
    edge ``edge`` (one of ``S, N, W, E`` for ``x2 = 0, x2 = pi, x1 = 0,
    x1 = pi``) and 0 on the rest of the boundary.  Corner nodes carry no
    equation and are set to 1/2 for display only.
    """
    if edge not in EDGES:
        raise ValueError(f"edge must be one of {EDGES}")
    if A < 0:
        raise ValueError("A must be >= 0")
    grid = grid or PeriodicGrid.for_peclet(A)
    m = _cell_m(grid)
    L, couple, x = dirichlet_operator(A, m, scheme)
    g = np.zeros((m + 1, m + 1))
    sl = slice(1, m)
    if edge == "S":
        g[sl, 0] = 1.0
    elif edge == "N":
        g[sl, m] = 1.0
    elif edge == "W":
        g[0, sl] = 1.0
    else:
        g[m, sl] = 1.0
    u, info, _ = _krylov(L, couple(g), rtol=rtol)
    F = g.copy()
    F[1:m, 1:m] = u.reshape(m - 1, m - 1)
    corners = [(0, 0), (0, m), (m, 0), (m, m)]
    for c in corners:
        F[c] = 0.5 if g[c[0] if c[0] else 1, c[1] if c[1] else 1] else F[c]
    return CellField(F, x, x, f"zeta_edge({edge})",
                     {"A": A, "n": grid.n, "scheme": scheme, "info": info})


def solve_exit_all(A: float, grid: PeriodicGrid | None = None, scheme: str = "sg"):
    """The four edge-exit fields sharing one factorisation."""
    grid = grid or PeriodicGrid.for_peclet(A)
    m = _cell_m(grid)
    L, couple, x = dirichlet_operator(A, m, scheme)
    ilu = None
    out = {}
    for edge in EDGES:
        g = np.zeros((m + 1, m + 1))
        sl = slice(1, m)
        {"S": lambda: g.__setitem__((sl, 0), 1.0), "N": lambda: g.__setitem__((sl, m), 1.0),
         "W": lambda: g.__setitem__((0, sl), 1.0), "E": lambda: g.__setitem__((m, sl), 1.0)}[edge]()
        u, info, ilu = _krylov(L, couple(g), ilu=ilu)
        F = g.copy()
        F[1:m, 1:m] = u.reshape(m - 1, m - 1)
        out[edge] = CellField(F, x, x, f"zeta_edge({edge})",
                              {"A": A, "n": grid.n, "scheme": scheme, "info": info})
    return out


def mid_edge_layer_points(delta: float) -> dict:
    """Points on ``h = delta`` inside ``(0, pi)^2`` opposite the middle of each edge."""
    y = math.asin(delta)
    return {"S": (math.pi / 2, y), "N": (math.pi / 2, math.pi - y),
            "W": (y, math.pi / 2), "E": (math.pi - y, math.pi / 2)}


def solve_resolvent(A: float, lam: float, grid: PeriodicGrid | None = None,
                    scheme: str = "sg", rtol: float = 1e-10) -> CellField:
    """``-Lap phi + A v . grad phi + lam phi = 1`` in ``(0, pi)^2``, ``phi = 0`` on the boundary."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    grid = grid or PeriodicGrid.for_peclet(A)
    m = _cell_m(grid)
    L, _, x = dirichlet_operator(A, m, scheme, lam)
    dx = math.pi / m
    u, info, _ = _krylov(L, np.full(L.shape[0], dx * dx), rtol=rtol)
    F = np.zeros((m + 1, m + 1))
    F[1:m, 1:m] = u.reshape(m - 1, m - 1)
    return CellField(F, x, x, f"resolvent({lam:g})",
                     {"A": A, "lam": lam, "n": grid.n, "scheme": scheme, "info": info})


def sup_on_layer(field_: CellField, delta: float, n_curve: int = 4001) -> float:
    """Supremum of a cell field over ``{0 < h < delta}``.

    Takes the larger of the nodal maximum inside the layer and the maximum
    of the bilinear interpolant along the level curve ``h = delta``.
    """
    X, Y = np.meshgrid(field_.x1, field_.x2, indexing="ij")
    H = np.sin(X) * np.sin(Y)
    inside = (H > 0) & (H < delta)
    best = float(field_.values[inside].max()) if inside.any() else -math.inf
    # parametrise h = delta by x1 in (asin delta, pi - asin delta)
    a = math.asin(delta)
    x1 = np.linspace(a, math.pi - a, n_curve)
    x2 = np.arcsin(np.clip(delta / np.sin(x1), -1.0, 1.0))
    pts = np.concatenate([np.stack([x1, x2], -1), np.stack([x1, math.pi - x2], -1)])
    best = max(best, float(field_.interpolator()(pts).max()))
    return best


# ---------------------------------------------------------------------------
# super-solutions


@dataclass
class SupersolutionCandidate:
    """Named explicit super-solution with its parameter record."""

    name: str
    params: dict = field(default_factory=dict)


@dataclass
class SupersolutionReport:
    name: str
    A: float
    min_residual: float
    required: float
    passed: bool
    checks: dict = field(default_factory=dict)


CANDIDATES = ("edge_quadratic", "corner_g0g1", "exit_exponential", "psi_plus", "resolvent_edge")


def _h_derivs(x1, x2):
    s1, c1, s2, c2 = np.sin(x1), np.cos(x1), np.sin(x2), np.cos(x2)
    h = s1 * s2
    g1, g2 = c1 * s2, s1 * c2
    lap = -2.0 * h
    v1, v2 = -s1 * c2, c1 * s2
    return h, g1, g2, lap, v1, v2


def _edge_region_samples(params: FlowParams, thickness: float, n: int = 400):
    """Dense samples of the south-edge component of the edge region of ``(0, pi)^2``.

    Returns points with ``0 <= h < thickness`` whose angular proxy stays
    at least ``beta0`` from the corner directions, mirrored below ``x2 = 0``.
    """
    from .flowfield import corner_angle_distance

    a = math.asin(min(thickness, 1.0))
    x1 = np.linspace(1e-3, math.pi - 1e-3, n)
    frac = np.linspace(0.0, 1.0, n)[:-1]
    X1, F = np.meshgrid(x1, frac, indexing="ij")
    hv = F * thickness
    ok = hv < np.sin(X1)
    X2 = np.arcsin(np.clip(hv / np.sin(X1), 0.0, 1.0))
    X2 = np.minimum(X2, math.pi / 2)
    pts = np.stack([X1[ok], X2[ok]], -1)
    pts = pts[pts[:, 1] <= a + 1.0]
    keep = corner_angle_distance(pts) > params.beta0
    pts = pts[keep]
    return np.concatenate([pts, pts * np.array([1.0, -1.0])])


def _audit_edge_quadratic(A, params: FlowParams, cand):
    delta = params.delta
    pts = _edge_region_samples(params, delta)
    h, g1, g2, lap, *_ = _h_derivs(pts[:, 0], pts[:, 1])
    grad2 = g1**2 + g2**2
    base = 2.0 * grad2 - 4.0 * h**2
    alpha = cand.params.get("alpha", 1.0 / float(base.min()))
    # phi = alpha (delta^2 - h^2); grad phi = -2 alpha h grad h; advection vanishes
    lap_phi = -2.0 * alpha * (grad2 + h * lap)
    adv = 0.0
    res = -lap_phi + adv
    return res, 1.0, {"alpha": alpha, "n_samples": int(res.size)}


def _corner_region_samples(params: FlowParams, n: int = 500):
    """Samples of the fattened corner component at the origin, first quadrant."""
    from .flowfield import corner_angle_distance

    g0 = corner_gamma0(params)
    s = np.linspace(1e-6, g0 * 1.05, n)
    X1, X2 = np.meshgrid(s, s, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], -1)
    h = np.sin(pts[:, 0]) * np.sin(pts[:, 1])
    keep = (h < params.delta) & (corner_angle_distance(pts) < params.beta0_prime)
    return pts[keep]


def corner_g0g1_functions(A: float, gamma0: float):
    """The two pieces of the one-dimensional corner super-solution.

    Returns a dict with ``xbar``, ``a0`` and callables ``g0, dg0, d2g0,
    g1, dg1, d2g1``.
    """
    xbar = 3.0 / (2.0 * math.sqrt(A))
    a0 = 9.0 / (8.0 * A) + (18.0 / A) * math.log(2.0 * gamma0 * math.sqrt(A) / 3.0)
    return dict(
        xbar=xbar,
        a0=a0,
        g0=lambda x: a0 - 0.5 * x**2,
        dg0=lambda x: -x,
        d2g0=lambda x: -np.ones_like(np.asarray(x, dtype=float)),
        g1=lambda x: (18.0 / A) * np.log(gamma0 / x),
        dg1=lambda x: -18.0 / (A * x),
        d2g1=lambda x: 18.0 / (A * x**2),
    )


def _audit_corner_g0g1(A, params: FlowParams, cand):
    gamma0 = cand.params.get("gamma0", corner_gamma0(params))
    f = corner_g0g1_functions(A, gamma0)
    xbar = f["xbar"]
    pts = _corner_region_samples(params)
    x1, x2 = pts[:, 0], pts[:, 1]
    outer = x1 > xbar
    g_p = np.where(outer, f["dg1"](np.maximum(x1, xbar)), f["dg0"](x1))
    g_pp = np.where(outer, f["d2g1"](np.maximum(x1, xbar)), f["d2g0"](x1))
    # phi(x) = g(|x1|): -phi'' + A v1 phi' with v1 = -sin x1 cos x2
    res = -g_pp + A * (-np.sin(x1) * np.cos(x2)) * g_p
    # reduced one-dimensional inequality on [xbar, gamma0], including xbar itself
    xs = np.concatenate([[xbar], np.linspace(xbar, gamma0, 2001)[1:]])
    reduced = -f["d2g1"](xs) - A * xs * f["dg1"](xs) / 2.0
    inner = -f["d2g0"](np.linspace(0.0, xbar, 101))
    checks = {
        "gamma0": gamma0,
        "xbar": xbar,
        "a0": f["a0"],
        "reduced_at_xbar": float(reduced[0]),
        "reduced_min": float(reduced.min()),
        "full_min": float(res.min()),
        "inner_min": float(inner.min()),
        "inner_max": float(inner.max()),
        "cos_x2_min": float(np.cos(x2).min()),
        "ratio_min": float((np.sin(x1) * np.cos(x2) / x1).min()),
        "glue_value_gap": float(f["g0"](xbar) - f["g1"](xbar)),
        "dg0_xbar": float(f["dg0"](xbar)),
        "dg1_xbar": float(f["dg1"](xbar)),
        "glue_slope_ok": bool(f["dg0"](xbar) >= f["dg1"](xbar)),
        "g1_nonneg": bool(np.all(f["g1"](xs) >= -1e-15)),
        "n_samples": int(res.size),
    }
    allres = np.concatenate([res, reduced, inner])
    return allres, 1.0, checks


def _theta_edge(x1, x2):
    """Angular coordinate on the south-edge component, increasing along ``v``.

    ``-(polar angle about (pi/2, pi/2) + pi/4)`` in the upper cell, mirrored
    in ``x2`` below the edge.  Returns value, gradient and Laplacian.
    """
    y = np.abs(x2)
    sgn = np.sign(x2) + (x2 == 0)
    dx_, dy_ = x1 - math.pi / 2, y - math.pi / 2
    r2 = dx_**2 + dy_**2
    th = -(np.arctan2(dy_, dx_) + math.pi / 4)
    t1 = dy_ / r2
    t2 = -dx_ / r2 * sgn
    t11 = -2.0 * dx_ * dy_ / r2**2
    t22 = 2.0 * dx_ * dy_ / r2**2
    return th, t1, t2, t11 + t22


def _audit_exit_exponential(A, params: FlowParams, cand):
    pts = _edge_region_samples(params, params.delta)
    x1, x2 = pts[:, 0], pts[:, 1]
    th, t1, t2, lap_t = _theta_edge(x1, x2)
    # keep the south-edge component only
    sel = (th > params.beta0) & (th < HALF_PI - params.beta0)
    x1, x2, th, t1, t2, lap_t = x1[sel], x2[sel], th[sel], t1[sel], t2[sel], lap_t[sel]
    _, _, _, _, v1, v2 = _h_derivs(x1, x2)
    grad2 = t1**2 + t2**2
    vdot = v1 * t1 + v2 * t2
    ratio = vdot / grad2
    gamma2 = cand.params.get("gamma2", 0.99 * float(ratio.min()))
    # zeta = exp(gamma2 A (theta - theta_top)); the residual divided by the
    # positive factor A^2 zeta is free of under/overflow
    res_n = -(gamma2 / A) * lap_t - gamma2**2 * grad2 + gamma2 * vdot
    checks = {"gamma2": gamma2, "ratio_min": float(ratio.min()),
              "far_end_value": float(np.exp(-gamma2 * A * (HALF_PI - 2.0 * params.beta0))),
              "theta_range": (float(th.min()), float(th.max())), "n_samples": int(res_n.size),
              "max_abs_laplacian": float(np.abs(lap_t).max())}
    return res_n, 0.0, checks


def psi_plus(h, t, c0, variant: str = "display"):
    """``1 - erf(h / (c0 sqrt t))`` (``"display"``) or ``1 - erf(h / sqrt(c0 t))``."""
    scale = c0 * np.sqrt(t) if variant == "display" else np.sqrt(c0 * t)
    return special.erfc(h / scale)


def _audit_psi_plus(A, params: FlowParams, cand):
    c0 = cand.params.get("c0", 10.0)
    t_max = cand.params.get("t_max", 0.125)
    variant = cand.params.get("variant", "display")
    n = 161
    s = np.linspace(1e-3, math.pi - 1e-3, n)
    X1, X2, T = np.meshgrid(s, s, np.linspace(t_max / 200, t_max, 200), indexing="ij")
    h, g1, g2, lap, v1, v2 = _h_derivs(X1, X2)
    grad2 = g1**2 + g2**2
    scale = c0 * np.sqrt(T) if variant == "display" else np.sqrt(c0 * T)
    dscale_dt = scale / (2.0 * T)
    u = h / scale
    e = np.exp(-u * u)
    k = 2.0 / math.sqrt(math.pi)
    # psi = 1 - erf(u): chain rule with u = h / scale(t)
    psi_t = -k * e * (-h * dscale_dt / scale**2)
    psi_x1 = -k * e * g1 / scale
    psi_x2 = -k * e * g2 / scale
    lap_psi = -k * e * (lap / scale - 2.0 * u * grad2 / scale**2)
    res = psi_t + A * (v1 * psi_x1 + v2 * psi_x2) - lap_psi
    # closed-form factorisation for comparison
    if variant == "display":
        bracket = 1.0 - 4.0 * T - 4.0 * grad2 / c0**2
        factor = h * e / (c0 * math.sqrt(math.pi) * T**1.5)
    else:
        bracket = 1.0 - 4.0 * T - 4.0 * grad2 / c0
        factor = h * e / (math.sqrt(math.pi * c0) * T**1.5)
    closed = factor * bracket
    scale_ref = np.maximum(np.abs(res), np.abs(closed)).max()
    checks = {"c0": c0, "t_max": t_max, "variant": variant,
              "bracket_min": float(bracket.min()),
              "closed_form_max_abs_diff": float(np.abs(res - closed).max() / scale_ref),
              "n_samples": int(res.size)}
    return res.ravel(), 0.0, checks


def _audit_resolvent_edge(A, params: FlowParams, cand):
    lam = cand.params.get("lam", 64.0)
    alpha = cand.params.get("alpha")
    if alpha is None:
        # fixed point: alpha sets the thickness eps = 1/sqrt(alpha lam), which sets alpha
        alpha = 1.0
        for _ in range(50):
            eps = 1.0 / math.sqrt(alpha * lam)
            pts = _edge_region_samples(params, eps)
            h, g1, g2, *_ = _h_derivs(pts[:, 0], pts[:, 1])
            new = 1.0 / (2.0 * float((g1**2 + g2**2).min()))
            if abs(new - alpha) < 1e-12 * alpha:
                break
            alpha = new
    eps = 1.0 / math.sqrt(alpha * lam)
    pts = _edge_region_samples(params, eps)
    pts = pts[pts[:, 1] >= 0]
    h, g1, g2, lap, v1, v2 = _h_derivs(pts[:, 0], pts[:, 1])
    grad2 = g1**2 + g2**2
    phi = alpha * h * (2.0 * eps - h)
    # grad phi = alpha (2 eps - 2 h) grad h; Lap phi = alpha ((2 eps - 2 h) Lap h - 2 |grad h|^2)
    lap_phi = alpha * ((2.0 * eps - 2.0 * h) * lap - 2.0 * grad2)
    adv = A * alpha * (2.0 * eps - 2.0 * h) * (v1 * g1 + v2 * g2)
    res = -lap_phi + adv + lam * phi
    top = alpha * eps * (2.0 * eps - eps)
    checks = {"lam": lam, "alpha": alpha, "eps": eps, "phi_at_eps_times_lam": top * lam,
              "n_samples": int(res.size)}
    return res, 1.0, checks


_AUDITS = {
    "edge_quadratic": _audit_edge_quadratic,
    "corner_g0g1": _audit_corner_g0g1,
    "exit_exponential": _audit_exit_exponential,
    "psi_plus": _audit_psi_plus,
    "resolvent_edge": _audit_resolvent_edge,
}


def verify_supersolution(candidate: SupersolutionCandidate, A: float,
                         params: FlowParams | None = None, tol: float = 1e-9
                         ) -> SupersolutionReport:
    """Minimum of the exact differential-inequality residual over the candidate's region.

    Passes when the minimum is at least ``required - tol``.  Residuals use
    closed-form derivatives only; no discretisation is involved.
    """
    if candidate.name not in _AUDITS:
        raise ValueError(f"unknown candidate {candidate.name!r}; choose from {CANDIDATES}")
    params = params or FlowParams(A)
    res, required, checks = _AUDITS[candidate.name](A, params, candidate)
    m = float(np.min(res))
    return SupersolutionReport(candidate.name, float(A), m, required, bool(m >= required - tol),
                               checks)
