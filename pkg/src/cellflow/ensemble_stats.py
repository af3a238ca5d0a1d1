"""Ensemble statistics: displacement moments, crossing CDFs, fits and bands.

Standard errors use batch means over 32 batches, path ``k`` going to batch
``path_index mod 32``, which keeps them deterministic under any worker
scheduling and robust to heavy-tailed crossing times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .analytic_bounds import erf_upper_cdf, log_lower_cdf
from .crossing_events import COORD_AMBIGUOUS, LAYER_EXIT, SEPARATRIX_HIT
from .montecarlo import EnsembleRun

N_BATCHES = 32


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be positive and strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def linear(cls, t_end, n):
        return cls(np.linspace(t_end / n, t_end, n))


@dataclass
class ScalingFit:
    """Least-squares line ``y = slope * x + intercept`` on a window."""

    window: tuple[float, float]
    slope: float
    slope_ci: float
    intercept: float
    r2: float
    n_points: int
    constants: dict = field(default_factory=dict)


@dataclass
class EnsembleSummary:
    """Per-time displacement moments and crossing statistics of one ensemble."""

    times: np.ndarray
    msd: np.ndarray
    msd_se: np.ndarray
    centered_var: np.ndarray
    msd_coord: np.ndarray
    msd_coord_se: np.ndarray
    mean_crossings: np.ndarray
    mean_crossings_se: np.ndarray
    n_paths: int

    def records(self):
        """Flat ``(time, statistic, value, stderr)`` rows."""
        for k, t in enumerate(self.times):
            yield t, "msd", self.msd[k], self.msd_se[k]
            yield t, "centered_var", self.centered_var[k], math.nan
            yield t, "msd_x1", self.msd_coord[k, 0], self.msd_coord_se[k, 0]
            yield t, "msd_x2", self.msd_coord[k, 1], self.msd_coord_se[k, 1]
            yield t, "mean_crossings", self.mean_crossings[k], self.mean_crossings_se[k]


# ---------------------------------------------------------------------------
# batch means


def batch_means_se(values, path_index, n_batches: int = N_BATCHES):
    """Mean over paths and its batch-means standard error.

    ``values`` has paths on axis 0; extra axes are treated independently.
    Batches with no paths are dropped.
    """
    values = np.asarray(values, dtype=float)
    b = np.asarray(path_index) % n_batches
    sums = np.zeros((n_batches,) + values.shape[1:])
    np.add.at(sums, b, values)
    counts = np.bincount(b, minlength=n_batches).astype(float)
    used = counts > 0
    means = sums[used] / counts[used].reshape((-1,) + (1,) * (values.ndim - 1))
    mean = values.mean(axis=0)
    k = means.shape[0]
    if k < 2:
        return mean, np.full_like(mean, np.nan)
    se = means.std(axis=0, ddof=1) / math.sqrt(k)
    return mean, se


# ---------------------------------------------------------------------------
# variance curves


def crossing_counts(run: EnsembleRun) -> np.ndarray:
    """Number of separatrix hits by each grid time, shape (paths, times)."""
    hits = run.ev_kind == SEPARATRIX_HIT
    counts = np.zeros((run.n_paths, run.grid.size))
    if hits.any():
        rows = run.ev_path[hits]
        k = np.searchsorted(run.grid, run.ev_t[hits], side="left")
        ok = k < run.grid.size
        np.add.at(counts, (rows[ok], k[ok]), 1.0)
    return np.cumsum(counts, axis=1)


def variance_curve(run: EnsembleRun) -> EnsembleSummary:
    """Displacement moments ``E|X_t - x|^2`` per grid time with batch-means SE.

    ``centered_var`` additionally removes the sample mean displacement
    (unbiased, ``ddof = 1``).
    """
    if run.n_paths < 2:
        raise ValueError("variance_curve needs at least 2 paths")
    disp = run.positions - run.x0
    sq = disp**2
    msd, msd_se = batch_means_se(sq.sum(axis=-1), run.path_index)
    coord, coord_se = batch_means_se(sq, run.path_index)
    centered = disp.var(axis=0, ddof=1).sum(axis=-1)
    cnt = crossing_counts(run)
    mc, mc_se = batch_means_se(cnt, run.path_index)
    return EnsembleSummary(run.grid.copy(), msd, msd_se, centered, coord, coord_se, mc, mc_se,
                           run.n_paths)


# ---------------------------------------------------------------------------
# crossing times


def tau_i_matrix(run: EnsembleRun, i: int, n_max: int) -> np.ndarray:
    """``tau^i_n`` for ``n = 1..n_max`` per path; ``inf`` when not reached."""
    out = np.full((run.n_paths, n_max), np.inf)
    sel = (run.ev_kind == SEPARATRIX_HIT) & (run.ev_coord == i)
    rows = run.ev_path[sel]
    ts = run.ev_t[sel]
    order = np.lexsort((ts, rows))
    rows, ts = rows[order], ts[order]
    if rows.size:
        first = np.r_[0, np.flatnonzero(np.diff(rows)) + 1]
        rank = np.arange(rows.size) - np.repeat(first, np.diff(np.r_[first, rows.size]))
        ok = rank < n_max
        out[rows[ok], rank[ok]] = ts[ok]
    return out


def dkw_epsilon(n_samples: int, alpha: float = 0.05) -> float:
    """Half-width of the Dvoretzky-Kiefer-Wolfowitz band at confidence ``1 - alpha``."""
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n_samples))


def empirical_cdf(samples, times) -> np.ndarray:
    """Fraction of ``samples`` (``inf`` allowed) that are ``<= t`` for each time."""
    s = np.sort(np.asarray(samples, dtype=float))
    return np.searchsorted(s, np.asarray(times, dtype=float), side="right") / s.size


def crossing_cdf(run: EnsembleRun, i: int, n: int, grid, alpha: float = 0.05):
    """Empirical ``P(tau^i_n <= t)`` on ``grid`` with its DKW half-width."""
    if n < 1:
        raise ValueError("n must be >= 1")
    taus = tau_i_matrix(run, i, n)[:, n - 1]
    return empirical_cdf(taus, grid), dkw_epsilon(run.n_paths, alpha)


def fit_upper_constant(cdf, n, delta, t) -> float:
    """Smallest ``c`` with ``cdf <= 1 - erf(n delta / (c sqrt t))`` at every point."""
    cdf = np.asarray(cdf, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), cdf.shape)
    n = np.broadcast_to(np.asarray(n, dtype=float), cdf.shape)
    pos = cdf > 0
    if not pos.any():
        return 0.0
    if np.any(cdf[pos] >= 1):
        return math.inf
    need = n[pos] * delta / (np.sqrt(t[pos]) * special.erfcinv(cdf[pos]))
    return float(need.max())


def fit_lower_constant(cdf, n, delta, t) -> float:
    """Smallest ``c`` with ``1 - c n delta |ln delta| / sqrt t <= cdf`` at every point."""
    cdf = np.asarray(cdf, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), cdf.shape)
    n = np.broadcast_to(np.asarray(n, dtype=float), cdf.shape)
    need = (1.0 - cdf) * np.sqrt(t) / (n * delta * abs(math.log(delta)))
    return float(need.max())


@dataclass
class CdfSandwich:
    c_upper: float
    c_lower: float
    eps: float
    max_upper_violation: float
    max_lower_violation: float
    passed: bool
    bounds_ordered: bool


def cdf_sandwich(train: EnsembleRun, valid: EnsembleRun, i: int, ns, grid,
                 alpha: float = 0.05) -> CdfSandwich:
    """Fit the erf and log constants on ``train``; validate on ``valid``.

    One ``c_upper`` and one ``c_lower`` serve every ``n`` in ``ns``.  The
    fitted band is tight against the training ECDF, so the held-out ECDF is
    compared with it at tolerance ``eps_train + eps_valid`` (each DKW
    half-width at level ``alpha / 2``): with probability at least
    ``1 - alpha`` the true CDF is within ``eps_train`` of the training ECDF
    and the held-out ECDF within ``eps_valid`` of the true CDF.
    """
    grid = np.asarray(grid, dtype=float)
    delta = train.params.delta
    cu, cl = 0.0, 0.0
    for n in ns:
        cdf, _ = crossing_cdf(train, i, n, grid, alpha)
        cu = max(cu, fit_upper_constant(cdf, n, delta, grid))
        cl = max(cl, fit_lower_constant(cdf, n, delta, grid))
    eps = dkw_epsilon(train.n_paths, alpha / 2) + dkw_epsilon(valid.n_paths, alpha / 2)
    up_v, lo_v = 0.0, 0.0
    ordered = True
    for n in ns:
        cdf, _ = crossing_cdf(valid, i, n, grid, alpha)
        upper = erf_upper_cdf(n, delta, cu, grid) if cu > 0 else np.zeros_like(grid)
        lower = log_lower_cdf(n, delta, cl, grid) if cl > 0 else np.ones_like(grid)
        up_v = max(up_v, float(np.max(cdf - upper)))
        lo_v = max(lo_v, float(np.max(lower - cdf)))
        ordered &= bool(np.all(lower <= upper + 1e-12))
    passed = up_v <= eps and lo_v <= eps
    return CdfSandwich(cu, cl, eps, up_v, lo_v, passed, ordered)


def coordinate_balance(run: EnsembleRun):
    """Fractions of first separatrix hits assigned to coordinate 1, 2 or neither.

    Returns
    -------
    p1, p2, p_ambiguous, n_events
    """
    sel = run.ev_kind == SEPARATRIX_HIT
    rows, coords, ts = run.ev_path[sel], run.ev_coord[sel], run.ev_t[sel]
    order = np.lexsort((ts, rows))
    rows, coords = rows[order], coords[order]
    first = np.r_[True, np.diff(rows) != 0] if rows.size else np.zeros(0, bool)
    c = coords[first]
    n = c.size
    if n == 0:
        return math.nan, math.nan, math.nan, 0
    return (float(np.mean(c == 1)), float(np.mean(c == 2)),
            float(np.mean(c == COORD_AMBIGUOUS)), int(n))


def layer_exit_times(run: EnsembleRun, n: int = 1) -> np.ndarray:
    """``sigma_n`` per path (``nan`` when not reached before the grid end)."""
    out = np.full(run.n_paths, np.nan)
    sel = run.ev_kind == LAYER_EXIT
    rows, ts = run.ev_path[sel], run.ev_t[sel]
    order = np.lexsort((ts, rows))
    rows, ts = rows[order], ts[order]
    if rows.size:
        first = np.r_[0, np.flatnonzero(np.diff(rows)) + 1]
        rank = np.arange(rows.size) - np.repeat(first, np.diff(np.r_[first, rows.size]))
        ok = rank == n - 1
        out[rows[ok]] = ts[ok]
    return out


# ---------------------------------------------------------------------------
# telescoping legs


@dataclass
class TelescopingReport:
    times: np.ndarray
    var: np.ndarray
    sum_sq: np.ndarray
    gap: np.ndarray
    cross: np.ndarray
    cross_se: np.ndarray
    max_z: float
    n_legs: int


def leg_increments(run: EnsembleRun, i: int, n_legs: int) -> np.ndarray:
    """``X_i(tau^i_n ^ t) - X_i(tau^i_{n-1} ^ t)`` for ``n = 1..n_legs``.

    The last leg collects everything after ``tau^i_{n_legs - 1}``, so the legs
    always sum to the full displacement.  Shape (paths, times, n_legs).
    """
    grid = run.grid
    taus = tau_i_matrix(run, i, n_legs)
    # coordinate i of the path at each hit
    sel = (run.ev_kind == SEPARATRIX_HIT) & (run.ev_coord == i)
    rows, ts, xs = run.ev_path[sel], run.ev_t[sel], run.ev_pos[sel, i - 1]
    order = np.lexsort((ts, rows))
    rows, xs = rows[order], xs[order]
    hit_x = np.full((run.n_paths, n_legs), np.nan)
    if rows.size:
        first = np.r_[0, np.flatnonzero(np.diff(rows)) + 1]
        rank = np.arange(rows.size) - np.repeat(first, np.diff(np.r_[first, rows.size]))
        ok = rank < n_legs
        hit_x[rows[ok], rank[ok]] = xs[ok]
    xt = run.positions[:, :, i - 1]
    x0 = run.x0[i - 1]
    # stopped values X_i(tau_n ^ t) for n = 0..n_legs-1, then X_i(t) closes the sum
    stopped = np.empty((run.n_paths, grid.size, n_legs + 1))
    stopped[:, :, 0] = x0
    for n in range(1, n_legs):
        reached = taus[:, n - 1][:, None] <= grid[None, :]
        stopped[:, :, n] = np.where(reached, hit_x[:, n - 1][:, None], xt)
    stopped[:, :, n_legs] = xt
    return np.diff(stopped, axis=-1)


def telescoping_check(run: EnsembleRun, i: int, n_legs: int = 6) -> TelescopingReport:
    """Compare ``E (X_i(t) - x_i)^2`` with the sum of squared leg means.

    Reports the gap ``|Var - sum_n E Delta_n^2|`` and every cross moment
    ``E Delta_n Delta_m`` (``n < m``) with its batch-means standard error;
    ``max_z`` is the largest ``|cross| / se`` over times and pairs with a
    nonzero standard error.
    """
    legs = leg_increments(run, i, n_legs)
    total = legs.sum(axis=-1)
    var, _ = batch_means_se(total**2, run.path_index)
    sq, _ = batch_means_se(legs**2, run.path_index)
    pairs = [(a, b) for a in range(n_legs) for b in range(a + 1, n_legs)]
    prods = np.stack([legs[:, :, a] * legs[:, :, b] for a, b in pairs], axis=-1)
    cross, cross_se = batch_means_se(prods, run.path_index)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(cross_se > 0, np.abs(cross) / cross_se, 0.0)
    return TelescopingReport(run.grid.copy(), var, sq.sum(axis=-1),
                             np.abs(var - sq.sum(axis=-1)), cross, cross_se,
                             float(np.nanmax(z)) if z.size else 0.0, n_legs)


# ---------------------------------------------------------------------------
# corner re-entry


@dataclass
class ReentryEstimate:
    p0: float
    se: float
    per_start: np.ndarray
    per_start_se: np.ndarray
    n_per_start: np.ndarray
    argmax: int


def corner_reentry_estimate(probes) -> ReentryEstimate:
    """Largest corner re-entry frequency over start points with its binomial SE.

    ``probes`` is a list (one entry per start point) of arrays as returned by
    :func:`cellflow.crossing_events.probe_ensemble`; timed-out probes are
    dropped.
    """
    freq, se, cnt = [], [], []
    for pr in probes:
        ok = pr[:, 0] == 0
        n = int(ok.sum())
        p = float(pr[ok, 4].mean()) if n else math.nan
        freq.append(p)
        se.append(math.sqrt(p * (1 - p) / n) if n else math.nan)
        cnt.append(n)
    freq, se, cnt = np.array(freq), np.array(se), np.array(cnt)
    j = int(np.nanargmax(freq))
    return ReentryEstimate(float(freq[j]), float(se[j]), freq, se, cnt, j)


# ---------------------------------------------------------------------------
# fits


def linear_fit(x, y, window=None) -> ScalingFit:
    """Ordinary least squares of ``y`` on ``x`` inside ``window``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is None:
        window = (float(x.min()), float(x.max()))
    sel = (x >= window[0]) & (x <= window[1])
    if sel.sum() < 4:
        raise ValueError(f"window {window} holds {int(sel.sum())} grid points, need >= 4")
    res = stats.linregress(x[sel], y[sel])
    tq = stats.t.ppf(0.975, sel.sum() - 2)
    return ScalingFit((float(window[0]), float(window[1])), float(res.slope),
                      float(tq * res.stderr), float(res.intercept), float(res.rvalue**2),
                      int(sel.sum()))


def loglog_slope(t, y, window) -> ScalingFit:
    """Slope of ``log y`` against ``log t`` on ``window``."""
    t = np.asarray(t, dtype=float)
    sel = (t >= window[0]) & (t <= window[1])
    fit = linear_fit(np.log(t[sel]), np.log(np.asarray(y, dtype=float)[sel]))
    fit.window = (float(window[0]), float(window[1]))
    return fit


def fit_regimes(times, var, changeover: float = 0.015, t_max: float = 0.04):
    """Fit ``var**2`` linear in ``t`` before ``changeover`` and ``var`` after.

    Returns
    -------
    early, late : ScalingFit
    """
    times = np.asarray(times, dtype=float)
    var = np.asarray(var, dtype=float)
    early_sel = times < changeover
    early = linear_fit(times[early_sel], var[early_sel] ** 2)
    early.window = (float(times[early_sel].min()), changeover)
    late = linear_fit(times, var, (changeover, t_max))
    return early, late


@dataclass
class SandwichFit:
    c_hat: float
    per_A: dict
    windows: dict
    passed: bool


def sandwich_window(delta: float, t_max: float = 0.05, factor: float = 25.0):
    """Intermediate window ``[factor (delta |ln delta|)^2, t_max]``."""
    return factor * (delta * abs(math.log(delta))) ** 2, t_max


def fit_sandwich(curves: dict, t_max: float = 0.05, factor: float = 25.0,
                 min_points: int = 4) -> SandwichFit:
    """Single constant bracketing ``var * delta / sqrt(t)`` for several ``A``.

    ``curves`` maps a label to ``(delta, times, var)``.  The constant is the
    smallest ``c`` with ``1 / (c |ln delta|) <= var delta / sqrt(t) <= c`` on
    every window, i.e. the minimiser of the largest one-sided violation.  A
    label whose window holds fewer than ``min_points`` grid times fails.
    """
    per, wins = {}, {}
    ok = True
    for key, (delta, times, var) in curves.items():
        lo, hi = sandwich_window(delta, t_max, factor)
        wins[key] = (lo, hi)
        times = np.asarray(times, dtype=float)
        sel = (times >= lo) & (times <= hi)
        if sel.sum() < min_points:
            ok = False
            per[key] = dict(q_min=math.nan, q_max=math.nan, c_needed=math.inf,
                            n_points=int(sel.sum()))
            continue
        q = np.asarray(var, dtype=float)[sel] * delta / np.sqrt(times[sel])
        ld = abs(math.log(delta))
        need = max(float(q.max()), 1.0 / (ld * float(q.min())))
        per[key] = dict(q_min=float(q.min()), q_max=float(q.max()), c_needed=need,
                        n_points=int(sel.sum()))
    c_hat = max(v["c_needed"] for v in per.values())
    return SandwichFit(c_hat, per, wins, ok and math.isfinite(c_hat))


def common_constant(values, max_ratio: float = 2.0, cap: float = math.inf):
    """Fitted common constant (the maximum) and whether the spread is bounded.

    Passes when ``max / min <= max_ratio`` and ``max <= cap``.
    """
    v = np.asarray(values, dtype=float)
    c = float(v.max())
    ratio = c / float(v.min())
    return c, ratio, bool(ratio <= max_ratio and c <= cap)
