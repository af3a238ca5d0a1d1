"""Euler-Maruyama stepping of ``dX = -A v(X) dt + sqrt(2) dW`` with seeded noise.

Each path owns a PCG64 generator seeded by the pair ``(seed, path_index)``
through :class:`numpy.random.SeedSequence`, so every Gaussian increment is a
function of that pair alone.  The hot loops live in ``@njit`` kernels that
draw from the same generator objects, which keeps the Python-level
:func:`simulate_path` and the compiled ensemble drivers bit-identical.

Positions are never folded back into a reference cell: displacement
statistics need unwrapped coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .flowfield import FlowParams, _vel


@dataclass(frozen=True)
class StepPolicy:
    """Step-size rule ``dt = min(dt_max, eps_drift / A, eps_layer * delta**2)``.

    The first constraint caps the drift displacement per step, the second
    keeps layer crossings resolved by many steps.  Terms that are undefined
    at ``A = 0`` are dropped.
    """

    dt_drift_frac: float = 0.01
    dt_layer_frac: float = 0.05
    dt_max: float = 1e-4

    def __post_init__(self):
        for name in ("dt_drift_frac", "dt_layer_frac", "dt_max"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive, got {val}")

    def dt(self, params: FlowParams) -> float:
        dt = self.dt_max
        if params.A > 0:
            dt = min(dt, self.dt_drift_frac / params.A, self.dt_layer_frac * params.delta**2)
        return float(dt)


class NoiseStream:
    """Gaussian increments for one path, keyed by ``(seed, path_index)``.

    Attributes
    ----------
    seed, path_index : int
    draws : int
        Number of standard normal pairs handed out so far.
    """

    def __init__(self, seed: int, path_index: int):
        if path_index < 0:
            raise ValueError("path_index must be nonnegative")
        self.seed = int(seed)
        self.path_index = int(path_index)
        self.generator = path_generator(seed, path_index)
        self.draws = 0

    def pair(self) -> np.ndarray:
        self.draws += 1
        return self.generator.standard_normal(2)


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """The generator owned by path ``path_index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(path_index)])))


@dataclass
class ParticleState:
    pos: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(2).copy()
        if not np.all(np.isfinite(self.pos)):
            raise ValueError("position must be finite")
        if self.t < 0:
            raise ValueError("time must be nonnegative")


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _em_step(x1, x2, dt, z1, z2, A):
    s = math.sqrt(2.0 * dt)
    if A == 0.0:
        return x1 + s * z1, x2 + s * z2
    v1, v2 = _vel(x1, x2)
    return x1 - A * v1 * dt + s * z1, x2 - A * v2 * dt + s * z2


@njit(cache=True)
def _n_steps(span, dt):
    # number of steps of size dt to cover span, the last one truncated
    n = math.ceil(span / dt)
    if n < 1:
        n = 1
    # guard against round-up from representation error
    if (n - 1) * dt >= span * (1.0 - 1e-12):
        n -= 1
    return max(n, 1)


@njit(cache=True)
def _advance_grid(rng, x1, x2, A, dt, grid, out):
    """Advance one path through the checkpoints ``grid``; fill ``out[k]``."""
    t0 = 0.0
    for k in range(grid.shape[0]):
        span = grid[k] - t0
        if span > 0.0:
            n = _n_steps(span, dt)
            for i in range(n):
                h_ = dt if i < n - 1 else span - (n - 1) * dt
                z1 = rng.standard_normal()
                z2 = rng.standard_normal()
                x1, x2 = _em_step(x1, x2, h_, z1, z2, A)
        out[k, 0] = x1
        out[k, 1] = x2
        t0 = grid[k]
    return x1, x2


@njit(cache=True)
def _rk4_substep(x1, x2, dt, A):
    k1a, k1b = _vel(x1, x2)
    k2a, k2b = _vel(x1 - 0.5 * A * dt * k1a, x2 - 0.5 * A * dt * k1b)
    k3a, k3b = _vel(x1 - 0.5 * A * dt * k2a, x2 - 0.5 * A * dt * k2b)
    k4a, k4b = _vel(x1 - A * dt * k3a, x2 - A * dt * k3b)
    x1 = x1 - A * dt * (k1a + 2.0 * k2a + 2.0 * k3a + k4a) / 6.0
    x2 = x2 - A * dt * (k1b + 2.0 * k2b + 2.0 * k3b + k4b) / 6.0
    return x1, x2


@njit(cache=True)
def _convect(x1, x2, dt, A, n_sub):
    h_ = dt / n_sub
    for _ in range(n_sub):
        x1, x2 = _rk4_substep(x1, x2, h_, A)
    return x1, x2


# ---------------------------------------------------------------------------
# public surface


def em_step(s: ParticleState, dt: float, z, params: FlowParams) -> ParticleState:
    """One Euler-Maruyama step ``pos - A v(pos) dt + sqrt(2 dt) z``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z1, z2 = np.asarray(z, dtype=float).reshape(2)
    x1, x2 = _em_step(float(s.pos[0]), float(s.pos[1]), float(dt), z1, z2, params.A)
    return ParticleState(np.array([x1, x2]), s.t + dt)


Observer = Callable[[ParticleState, ParticleState], None]


def simulate_path(
    x0,
    t_end: float,
    policy: StepPolicy,
    noise: NoiseStream,
    params: FlowParams,
    observers: Iterable[Observer] = (),
) -> ParticleState:
    """Advance one path from ``x0`` to ``t_end``, notifying observers per step.

    Each observer is called as ``obs(prev, new)`` after every step.  Step
    times are ``k * dt`` with the last step truncated to land on ``t_end``.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    state = ParticleState(x0, 0.0)
    if t_end == 0:
        return state
    observers = list(observers)
    dt = policy.dt(params)
    n = _n_steps(float(t_end), dt)
    A = params.A
    x1, x2 = float(state.pos[0]), float(state.pos[1])
    for i in range(n):
        h_ = dt if i < n - 1 else t_end - (n - 1) * dt
        z = noise.pair()
        y1, y2 = _em_step(x1, x2, h_, z[0], z[1], A)
        t_new = t_end if i == n - 1 else (i + 1) * dt
        if observers:
            prev = ParticleState(np.array([x1, x2]), i * dt)
            new = ParticleState(np.array([y1, y2]), t_new)
            for obs in observers:
                obs(prev, new)
        x1, x2 = y1, y2
    return ParticleState(np.array([x1, x2]), float(t_end))


def simulate_grid(x0, grid: Sequence[float], policy: StepPolicy, seed: int,
                  path_index: int, params: FlowParams) -> np.ndarray:
    """Positions of one path at the checkpoint times ``grid``.

    Steps are truncated at each checkpoint, so the result at the final
    checkpoint equals :func:`simulate_path` only when ``grid`` holds a single
    time.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be nonnegative and strictly increasing")
    out = np.empty((grid.size, 2))
    x0 = np.asarray(x0, dtype=float)
    _advance_grid(path_generator(seed, path_index), float(x0[0]), float(x0[1]),
                  params.A, policy.dt(params), grid, out)
    return out


def convect_exact(s: ParticleState, dt: float, params: FlowParams,
                  max_substep: float | None = None) -> ParticleState:
    """Noise-free transport ``x' = -A v(x)`` by classical RK4 substeps.

    The substep defaults to ``0.002 / A`` so that ``h`` drifts by far less
    than ``1e-9`` per unit of scaled time.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if params.A == 0:
        return ParticleState(s.pos, s.t + dt)
    if max_substep is None:
        max_substep = 0.002 / params.A
    n_sub = max(1, math.ceil(dt / max_substep))
    x1, x2 = _convect(float(s.pos[0]), float(s.pos[1]), float(dt), params.A, n_sub)
    return ParticleState(np.array([x1, x2]), s.t + dt)


def orbit_period(h_level: float, A: float) -> float:
    """Period of the closed streamline ``h = h_level`` in a cell.

    Uses the complete elliptic integral form ``T = 4 K(1 - h^2) / A``, which
    follows from ``|v| = |grad h|`` on the level set.
    """
    from scipy.special import ellipk

    if not 0 < abs(h_level) < 1:
        raise ValueError("need 0 < |h| < 1 for a closed orbit")
    return float(4.0 * ellipk(1.0 - h_level**2) / A)


__all__ = [
    "StepPolicy",
    "NoiseStream",
    "ParticleState",
    "path_generator",
    "em_step",
    "simulate_path",
    "simulate_grid",
    "convect_exact",
    "orbit_period",
]
