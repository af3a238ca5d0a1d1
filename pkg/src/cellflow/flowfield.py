"""Cellular flow geometry: stream function, velocity, cells and layer regions.

The flow is generated by the stream function ``h(x) = sin(x1) sin(x2)`` with
velocity ``v = (-d2 h, d1 h)``.  Cells are the squares
``(k pi, (k+1) pi) x (m pi, (m+1) pi)``; the separatrix is the lattice of lines
where ``h = 0``.

Public functions accept points as array-likes whose last axis has length 2 and
broadcast over the leading axes.  Scalar ``@njit`` kernels (names starting
with an underscore) are shared with the time-stepping and event code so that
both evaluate exactly the same arithmetic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numba import njit
from scipy.optimize import brentq

PI = math.pi
HALF_PI = 0.5 * math.pi
QUARTER_PI = 0.25 * math.pi


class RegionTag(IntEnum):
    """Mutually exclusive region labels returned by :func:`classify_region`.

    ``FATTENED_CORNER`` marks points of the fattened corner region that are
    not in the corner region proper; use :func:`in_fattened_corner` for the
    inclusive membership test.
    """

    INTERIOR = 0
    EDGE_LAYER = 1
    CORNER_LAYER = 2
    FATTENED_CORNER = 3


@dataclass(frozen=True)
class FlowParams:
    """Peclet number, layer constant and corner half-angles.

    Parameters
    ----------
    A : float
        Peclet number (drift amplitude).  ``A = 0`` is accepted for pure
        diffusion runs; the layer is then the whole plane.
    N : float
        Layer constant; the layer half-width is ``delta = N / sqrt(A)``.
    beta0, beta0_prime : float
        Corner and fattened-corner half-angles of the angular proxy, with
        ``0 < beta0 < beta0_prime < pi/4``.
    """

    A: float
    N: float = 1.0
    beta0: float = 0.15
    beta0_prime: float = 0.30
    delta: float = field(init=False, repr=False)

    def __post_init__(self):
        A, N = float(self.A), float(self.N)
        if not np.isfinite(A) or A < 0:
            raise ValueError(f"A must be finite and >= 0, got {self.A}")
        if not N > 0:
            raise ValueError(f"N must be > 0, got {self.N}")
        if not 0 < self.beta0 < self.beta0_prime < QUARTER_PI:
            raise ValueError(
                "need 0 < beta0 < beta0_prime < pi/4, got "
                f"{self.beta0}, {self.beta0_prime}"
            )
        delta = N / math.sqrt(A) if A > 0 else math.inf
        if A > 0 and not delta < 1:
            raise ValueError(f"layer half-width N/sqrt(A) = {delta} must be < 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "delta", delta)

    @property
    def log_delta(self) -> float:
        """``|ln delta|``."""
        return abs(math.log(self.delta))


@dataclass(frozen=True)
class CellCoords:
    """Cell index, stream-function value and angular proxy of a point."""

    cell: tuple[int, int]
    h: float
    theta_proxy: float


# ---------------------------------------------------------------------------
# scalar kernels


@njit(cache=True)
def _h(x1, x2):
    return math.sin(x1) * math.sin(x2)


@njit(cache=True)
def _vel(x1, x2):
    s1 = math.sin(x1)
    c1 = math.cos(x1)
    s2 = math.sin(x2)
    c2 = math.cos(x2)
    return -s1 * c2, c1 * s2


@njit(cache=True)
def _theta_proxy(x1, x2):
    # polar angle about the centre of the point's own cell, oriented by the
    # sign of h in that cell and shifted so that corners sit at n*pi/2
    k = math.floor(x1 / PI)
    m = math.floor(x2 / PI)
    c1 = (k + 0.5) * PI
    c2 = (m + 0.5) * PI
    sgn = 1.0 if (int(k) + int(m)) % 2 == 0 else -1.0
    return sgn * (math.atan2(x2 - c2, x1 - c1) + QUARTER_PI)


@njit(cache=True)
def _corner_angle_distance(theta):
    # distance from theta to the nearest multiple of pi/2
    r = (theta + QUARTER_PI) % HALF_PI
    return abs(r - QUARTER_PI)


@njit(cache=True)
def _region(x1, x2, delta, beta0, beta0_prime):
    if abs(_h(x1, x2)) >= delta:
        return 0
    d = _corner_angle_distance(_theta_proxy(x1, x2))
    if d < beta0:
        return 2
    if d < beta0_prime:
        return 3
    return 1


# ---------------------------------------------------------------------------
# vectorised public surface


def _split(p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 2:
        raise ValueError(f"points need a trailing axis of length 2, got {p.shape}")
    return p[..., 0], p[..., 1]


def hamiltonian(p):
    """Stream function ``sin(x1) sin(x2)``."""
    x1, x2 = _split(p)
    return np.sin(x1) * np.sin(x2)


def velocity(p):
    """Velocity ``(-sin x1 cos x2, cos x1 sin x2)``, stacked on the last axis."""
    x1, x2 = _split(p)
    return np.stack([-np.sin(x1) * np.cos(x2), np.cos(x1) * np.sin(x2)], axis=-1)


def grad_h(p):
    """Exact gradient ``(cos x1 sin x2, sin x1 cos x2)``."""
    x1, x2 = _split(p)
    return np.stack([np.cos(x1) * np.sin(x2), np.sin(x1) * np.cos(x2)], axis=-1)


def laplacian_h(p):
    """Exact Laplacian of the stream function, ``-2 sin x1 sin x2``."""
    x1, x2 = _split(p)
    return -2.0 * np.sin(x1) * np.sin(x2)


def divergence_v(p):
    """Divergence of the velocity from its analytic partial derivatives."""
    x1, x2 = _split(p)
    dv1_dx1 = -np.cos(x1) * np.cos(x2)
    dv2_dx2 = np.cos(x1) * np.cos(x2)
    return dv1_dx1 + dv2_dx2


def cell_index(p):
    """Integer pair ``(k, m)`` of the cell ``(k pi, (k+1) pi) x (m pi, (m+1) pi)``."""
    x1, x2 = _split(p)
    return np.stack([np.floor(x1 / PI), np.floor(x2 / PI)], axis=-1).astype(np.int64)


def theta_proxy(p):
    """Angular proxy: oriented polar angle about the cell centre plus ``pi/4``.

    Corners of every cell sit at integer multiples of ``pi/2``.  The proxy is
    harmonic inside each cell and its distance to the nearest corner direction
    is continuous across cell edges.
    """
    x1, x2 = _split(p)
    k = np.floor(x1 / PI)
    m = np.floor(x2 / PI)
    sgn = np.where((k + m) % 2 == 0, 1.0, -1.0)
    return sgn * (np.arctan2(x2 - (m + 0.5) * PI, x1 - (k + 0.5) * PI) + QUARTER_PI)


def corner_angle_distance(p):
    """Distance of the angular proxy to the nearest corner direction."""
    r = (theta_proxy(p) + QUARTER_PI) % HALF_PI
    return np.abs(r - QUARTER_PI)


def cell_coords(p) -> CellCoords:
    """Cell index, ``h`` and angular proxy of a single point."""
    k, m = cell_index(p)
    return CellCoords((int(k), int(m)), float(hamiltonian(p)), float(theta_proxy(p)))


def classify_region(p, params: FlowParams):
    """Region tag(s) of the point(s) ``p``.

    Returns a :class:`RegionTag` for a single point, an integer array of tag
    values otherwise.
    """
    tag = np.full(np.shape(hamiltonian(p)), RegionTag.INTERIOR, dtype=np.int64)
    inside = np.abs(hamiltonian(p)) < params.delta
    d = corner_angle_distance(p)
    tag[inside] = RegionTag.EDGE_LAYER
    tag[inside & (d < params.beta0_prime)] = RegionTag.FATTENED_CORNER
    tag[inside & (d < params.beta0)] = RegionTag.CORNER_LAYER
    if tag.ndim == 0:
        return RegionTag(int(tag))
    return tag


def in_corner(p, params: FlowParams):
    """Membership in the corner region (layer points near a corner direction)."""
    return (np.abs(hamiltonian(p)) < params.delta) & (corner_angle_distance(p) < params.beta0)


def in_fattened_corner(p, params: FlowParams):
    """Membership in the fattened corner region; contains :func:`in_corner`."""
    return (np.abs(hamiltonian(p)) < params.delta) & (
        corner_angle_distance(p) < params.beta0_prime
    )


def in_edge(p, params: FlowParams):
    """Membership in the edge region: layer points away from the corner closure."""
    return (np.abs(hamiltonian(p)) < params.delta) & (corner_angle_distance(p) > params.beta0)


def corner_coords(p):
    """Stream function and corner angular coordinate near a lattice corner.

    The point is translated by the nearest lattice corner to the origin and
    ``cos(x1) / cos(x2)`` is returned raw, without shifting its origin.

    Returns
    -------
    h, theta_corner : ndarray or float

    Raises
    ------
    ValueError
        If any point lies farther than ``pi/4`` from its nearest corner, where
        the secant is no longer controlled.
    """
    x1, x2 = _split(p)
    y1 = x1 - PI * np.round(x1 / PI)
    y2 = x2 - PI * np.round(x2 / PI)
    if np.any(np.hypot(y1, y2) > QUARTER_PI):
        raise ValueError("corner_coords needs points within pi/4 of a lattice corner")
    h = np.sin(y1) * np.sin(y2)
    theta = np.cos(y1) / np.cos(y2)
    if np.ndim(h) == 0:
        return float(h), float(theta)
    return h, theta


def corner_gamma0(params: FlowParams) -> float:
    """Largest ``x1`` reached by the fattened corner component at the origin.

    The component is bounded by the ray of angular-proxy distance
    ``beta0_prime`` from the cell centre and by the level set ``h = delta``;
    the supremum sits where they meet.
    """
    phi = -0.75 * PI + params.beta0_prime
    direction = np.array([math.cos(phi), math.sin(phi)])
    center = np.array([HALF_PI, HALF_PI])
    # h decreases from 1 at the centre to 0 where the ray hits x2 = 0
    r_edge = HALF_PI / -direction[1]

    def f(r):
        q = center + r * direction
        return _h(q[0], q[1]) - min(params.delta, 1.0)

    if f(r_edge) >= 0 or params.delta >= 1:
        r = 0.0
    else:
        r = brentq(f, 0.0, r_edge, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return float(center[0] + r * direction[0])


def layer16_mesh(params: FlowParams) -> np.ndarray:
    """Sixteen start points spread over the layer of the cell ``(0, pi)^2``.

    Four points along each of two edges (south and west) at two layer depths
    ``h = delta/4`` and ``h = 3 delta/4``: mid-edge, quarter-edge, and two
    near-corner positions inside the corner region.
    """
    delta = params.delta
    out = []
    s_positions = [HALF_PI, 0.25 * PI, 0.7 * PI, 0.04 * PI]
    for frac in (0.25, 0.75):
        hv = frac * delta
        for a in s_positions:
            # south edge point (a, x2) with sin(a) sin(x2) = hv
            out.append((a, math.asin(min(hv / math.sin(a), 1.0))))
        for a in s_positions[:2] + [0.3 * PI, 0.96 * PI]:
            out.append((math.asin(min(hv / math.sin(a), 1.0)), a))
    pts = np.array(out)
    if pts.shape != (16, 2):
        raise AssertionError("layer16 mesh construction is broken")
    return pts


def edge_mesh(params: FlowParams, n_along: int = 5, depths=(0.25, 0.5, 0.75),
              margin: float = 0.01) -> np.ndarray:
    """Start points in the south-edge part of the shrunken edge region of ``(0, pi)^2``.

    For each layer depth ``h = frac * delta`` the ``n_along`` points run
    along the edge from one end of the region (corner distance
    ``beta0_prime + margin``) to the other, so the mesh reaches the region
    boundary on both sides.
    """
    delta = params.delta
    out = []
    x1 = np.linspace(1e-3, PI - 1e-3, 20001)
    for frac in depths:
        hv = frac * delta
        ok = np.sin(x1) > hv
        xs = x1[ok]
        pts = np.stack([xs, np.arcsin(hv / np.sin(xs))], axis=-1)
        # the level curve also runs along the west and east edges; keep the south arc
        ang = np.arctan2(pts[:, 1] - HALF_PI, pts[:, 0] - HALF_PI)
        pts = pts[(ang > -3 * QUARTER_PI) & (ang < -QUARTER_PI)]
        pts = pts[corner_angle_distance(pts) > params.beta0_prime + margin]
        if pts.shape[0] < n_along:
            raise ValueError("edge region too small for the requested mesh")
        pick = np.linspace(0, pts.shape[0] - 1, n_along).round().astype(int)
        out.append(pts[pick])
    return np.concatenate(out)
