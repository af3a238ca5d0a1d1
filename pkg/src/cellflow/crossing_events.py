"""Online detection of separatrix hits, layer exits and region exits.

A path alternates between two phases.  While *awaiting a layer exit* it
waits for ``|h| >= delta``; while *awaiting a separatrix hit* it waits for
``h`` to change sign.  At time zero the path is awaiting a layer exit, and a
start outside the layer logs that exit immediately at ``t = 0``.

Events are located on the straight segment joining consecutive positions by
bisection of the relevant predicate; the remainder of the segment is then
scanned again so that one step can hold several events.  Missed double
crossings inside a single step are a known O(sqrt(dt)) bias.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np
from numba import njit

from .flowfield import PI, FlowParams, _corner_angle_distance, _h, _theta_proxy
from .sde_engine import ParticleState, StepPolicy, _em_step, _n_steps, path_generator

EPS_EVENT = 1e-10
EPS_CORNER = 1e-6
BISECTION_ITERS = 60

# event kinds
SEPARATRIX_HIT = 0
LAYER_EXIT = 1
EDGE_EXIT = 2
CORNER_EXIT = 3

# phases
AWAIT_EXIT = 0
AWAIT_HIT = 1

# coordinate labels; 0 marks a corner-ambiguous hit, -1 a non-hit event
COORD_NONE = -1
COORD_AMBIGUOUS = 0


class EventKind(IntEnum):
    SEPARATRIX_HIT = SEPARATRIX_HIT
    LAYER_EXIT = LAYER_EXIT
    EDGE_EXIT = EDGE_EXIT
    CORNER_EXIT = CORNER_EXIT


class ProbeTarget(IntEnum):
    """Stopping rules for :func:`probe_exit`."""

    EXIT_EDGE_REGION = 0
    EXIT_FATTENED_CORNER = 1
    HIT_DIFFERENT_CORNER = 2
    HIT_SEPARATRIX = 3


@dataclass(frozen=True)
class CrossingEvent:
    kind: EventKind
    t: float
    pos: tuple[float, float]
    coord: int | None = None


@dataclass(frozen=True)
class ProbeResult:
    """Outcome of a region-exit probe.

    ``corner_entry`` is set for edge-region exits that leave through the
    corner side (still inside the layer) rather than through ``|h| = delta``.
    """

    t: float
    pos: tuple[float, float]
    corner_entry: bool
    timed_out: bool = False


class ProbeTimeout(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _dist_to_lattice(x):
    return abs(x - PI * math.floor(x / PI + 0.5))


@njit(cache=True)
def _hit_coord(x1, x2, eps_corner):
    d1 = _dist_to_lattice(x1)
    d2 = _dist_to_lattice(x2)
    n1 = d1 < eps_corner
    n2 = d2 < eps_corner
    if n1 and n2:
        return COORD_AMBIGUOUS
    if n1:
        return 1
    if n2:
        return 2
    # neither within tolerance: the refined point is still on h = 0 to
    # rounding, so the closer line is the one that was hit
    return 1 if d1 < d2 else 2


@njit(cache=True)
def _interp(a1, a2, b1, b2, s):
    return a1 + s * (b1 - a1), a2 + s * (b2 - a2)


@njit(cache=True)
def _bisect_sign(a1, a2, b1, b2, lo, hi, ref, iters):
    # lo keeps the sign ref, hi does not
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        y1, y2 = _interp(a1, a2, b1, b2, mid)
        if _h(y1, y2) * ref > 0.0:
            lo = mid
        else:
            hi = mid
    return lo, hi


@njit(cache=True)
def _bisect_level(a1, a2, b1, b2, lo, hi, level, iters):
    # lo has |h| < level, hi has |h| >= level
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        y1, y2 = _interp(a1, a2, b1, b2, mid)
        if abs(_h(y1, y2)) >= level:
            hi = mid
        else:
            lo = mid
    return lo, hi


@njit(cache=True)
def _push(buf_kind, buf_t, buf_x, buf_coord, n, kind, t, x1, x2, coord):
    if n < buf_kind.shape[0]:
        buf_kind[n] = kind
        buf_t[n] = t
        buf_x[n, 0] = x1
        buf_x[n, 1] = x2
        buf_coord[n] = coord
    return n + 1


@njit(cache=True)
def _scan_segment(a1, a2, b1, b2, ta, tb, phase, ref, delta, eps_corner, iters,
                  buf_kind, buf_t, buf_x, buf_coord, n):
    """Log every phase event on the segment a -> b; return (phase, ref, n)."""
    s0 = 0.0
    while True:
        if phase == AWAIT_EXIT:
            if abs(_h(b1, b2)) < delta:
                return phase, ref, n
            lo, hi = _bisect_level(a1, a2, b1, b2, s0, 1.0, delta, iters)
            y1, y2 = _interp(a1, a2, b1, b2, hi)
            t = ta + hi * (tb - ta)
            n = _push(buf_kind, buf_t, buf_x, buf_coord, n, LAYER_EXIT, t, y1, y2, COORD_NONE)
            ref = 1.0 if _h(y1, y2) > 0.0 else -1.0
            phase = AWAIT_HIT
            s0 = hi
        else:
            if _h(b1, b2) * ref > 0.0:
                return phase, ref, n
            lo, hi = _bisect_sign(a1, a2, b1, b2, s0, 1.0, ref, iters)
            s = 0.5 * (lo + hi)
            y1, y2 = _interp(a1, a2, b1, b2, s)
            t = ta + s * (tb - ta)
            c = _hit_coord(y1, y2, eps_corner)
            n = _push(buf_kind, buf_t, buf_x, buf_coord, n, SEPARATRIX_HIT, t, y1, y2, c)
            phase = AWAIT_EXIT
            s0 = hi


@njit(cache=True)
def _start_phase(x1, x2, delta, buf_kind, buf_t, buf_x, buf_coord):
    # a start outside the layer exits it at t = 0
    if abs(_h(x1, x2)) >= delta:
        n = _push(buf_kind, buf_t, buf_x, buf_coord, 0, LAYER_EXIT, 0.0, x1, x2, COORD_NONE)
        ref = 1.0 if _h(x1, x2) > 0.0 else -1.0
        return AWAIT_HIT, ref, n
    return AWAIT_EXIT, 0.0, 0


@njit(cache=True)
def _logged_path(rng, x1, x2, A, dt, delta, eps_corner, iters, grid, out,
                 buf_kind, buf_t, buf_x, buf_coord):
    """Advance one path through ``grid`` while logging crossing events.

    Returns the number of events found, which may exceed the buffer length;
    the caller then retries with a larger buffer.
    """
    phase, ref, n = _start_phase(x1, x2, delta, buf_kind, buf_t, buf_x, buf_coord)
    t0 = 0.0
    for k in range(grid.shape[0]):
        span = grid[k] - t0
        if span > 0.0:
            m = _n_steps(span, dt)
            for i in range(m):
                h_ = dt if i < m - 1 else span - (m - 1) * dt
                ta = t0 + i * dt
                tb = grid[k] if i == m - 1 else t0 + (i + 1) * dt
                z1 = rng.standard_normal()
                z2 = rng.standard_normal()
                y1, y2 = _em_step(x1, x2, h_, z1, z2, A)
                phase, ref, n = _scan_segment(x1, x2, y1, y2, ta, tb, phase, ref, delta,
                                              eps_corner, iters, buf_kind, buf_t, buf_x,
                                              buf_coord, n)
                x1, x2 = y1, y2
        out[k, 0] = x1
        out[k, 1] = x2
        t0 = grid[k]
    return n


@njit(cache=True)
def _nearest_corner(x1, x2):
    return math.floor(x1 / PI + 0.5), math.floor(x2 / PI + 0.5)


@njit(cache=True)
def _in_target(x1, x2, target, delta, beta0, beta0p, k0, m0):
    """True while the path is still inside the region of the probe."""
    hv = abs(_h(x1, x2))
    if target == 3:
        return hv > 0.0
    if target == 2:
        # continue unless inside the corner region of another corner
        if hv >= delta:
            return True
        if _corner_angle_distance(_theta_proxy(x1, x2)) >= beta0:
            return True
        k, m = _nearest_corner(x1, x2)
        return k == k0 and m == m0
    if hv >= delta:
        return False
    d = _corner_angle_distance(_theta_proxy(x1, x2))
    if target == 0:
        return d > beta0
    return d < beta0p


@njit(cache=True)
def _probe(rng, x1, x2, A, dt, t_cap, target, delta, beta0, beta0p, iters):
    """Run until the probe region is left; return (status, t, x1, x2).

    status is 0 on exit, 1 on reaching ``t_cap``.
    """
    k0, m0 = _nearest_corner(x1, x2)
    if target == 3:
        ref = 1.0 if _h(x1, x2) > 0.0 else -1.0
        if _h(x1, x2) == 0.0:
            return 0, 0.0, x1, x2
    else:
        ref = 0.0
        if not _in_target(x1, x2, target, delta, beta0, beta0p, k0, m0):
            return 0, 0.0, x1, x2
    m = _n_steps(t_cap, dt)
    for i in range(m):
        h_ = dt if i < m - 1 else t_cap - (m - 1) * dt
        z1 = rng.standard_normal()
        z2 = rng.standard_normal()
        y1, y2 = _em_step(x1, x2, h_, z1, z2, A)
        ta = i * dt
        if target == 3:
            if _h(y1, y2) * ref <= 0.0:
                lo, hi = _bisect_sign(x1, x2, y1, y2, 0.0, 1.0, ref, iters)
                s = 0.5 * (lo + hi)
                p1, p2 = _interp(x1, x2, y1, y2, s)
                return 0, ta + s * h_, p1, p2
        elif not _in_target(y1, y2, target, delta, beta0, beta0p, k0, m0):
            lo = 0.0
            hi = 1.0
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                p1, p2 = _interp(x1, x2, y1, y2, mid)
                if _in_target(p1, p2, target, delta, beta0, beta0p, k0, m0):
                    lo = mid
                else:
                    hi = mid
            p1, p2 = _interp(x1, x2, y1, y2, hi)
            return 0, ta + hi * h_, p1, p2
        x1, x2 = y1, y2
    return 1, t_cap, x1, x2


# ---------------------------------------------------------------------------
# logs


@dataclass
class CrossingLog:
    """Ordered events of one path plus derived stopping-time sequences.

    ``tau[0] = 0`` is included; ``sigma[n]`` is the ``n``-th layer exit
    (index 0 unused and set to nan); ``tau_i[i]`` lists ``0`` followed by the
    hits assigned to coordinate ``i``.
    """

    events: list[CrossingEvent] = field(default_factory=list)
    path_index: int = 0

    @classmethod
    def from_arrays(cls, kind, t, pos, coord, path_index=0):
        ev = []
        for k, tt, p, c in zip(kind, t, pos, coord):
            cc = None if c <= 0 else int(c)
            ev.append(CrossingEvent(EventKind(int(k)), float(tt), (float(p[0]), float(p[1])), cc))
        return cls(ev, path_index)

    @property
    def tau(self) -> np.ndarray:
        hits = [e.t for e in self.events if e.kind == EventKind.SEPARATRIX_HIT]
        return np.array([0.0] + hits)

    @property
    def sigma(self) -> np.ndarray:
        exits = [e.t for e in self.events if e.kind == EventKind.LAYER_EXIT]
        return np.array([np.nan] + exits)

    def tau_i(self, i: int) -> np.ndarray:
        hits = [e.t for e in self.events if e.kind == EventKind.SEPARATRIX_HIT and e.coord == i]
        return np.array([0.0] + hits)

    @property
    def n_ambiguous(self) -> int:
        return sum(1 for e in self.events if e.kind == EventKind.SEPARATRIX_HIT and e.coord is None)

    def check_ordering(self) -> bool:
        """``0 <= sigma_1 <= tau_1 <= sigma_2 <= ...`` with strict alternation."""
        times = [e.t for e in self.events]
        kinds = [e.kind for e in self.events if e.kind in (EventKind.SEPARATRIX_HIT, EventKind.LAYER_EXIT)]
        if any(b < a for a, b in zip(times, times[1:])):
            return False
        expect = EventKind.LAYER_EXIT
        for k in kinds:
            if k != expect:
                return False
            expect = EventKind.SEPARATRIX_HIT if k == EventKind.LAYER_EXIT else EventKind.LAYER_EXIT
        return True

    def records(self):
        for e in self.events:
            yield (self.path_index, e.kind.name, e.t, e.pos[0], e.pos[1],
                   "" if e.coord is None else e.coord)


CSV_HEADER = ("path_index", "kind", "t", "x1", "x2", "coord")


def write_events_csv(path, logs: Iterable[CrossingLog]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for log in logs:
            for rec in log.records():
                w.writerow([rec[0], rec[1], repr(rec[2]), repr(rec[3]), repr(rec[4]), rec[5]])


def read_events_csv(path) -> list[CrossingLog]:
    logs: dict[int, CrossingLog] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        for row in r:
            pi = int(row[0])
            coord = int(row[5]) if row[5] else None
            ev = CrossingEvent(EventKind[row[1]], float(row[2]), (float(row[3]), float(row[4])), coord)
            logs.setdefault(pi, CrossingLog([], pi)).events.append(ev)
    return [logs[k] for k in sorted(logs)]


# ---------------------------------------------------------------------------
# step observer


class CrossingObserver:
    """Step observer for :func:`cellflow.sde_engine.simulate_path`.

    Parameters
    ----------
    x0 : array_like
        Start position; a start outside the layer logs a layer exit at t = 0.
    """

    def __init__(self, x0, params: FlowParams, path_index: int = 0,
                 eps_corner: float = EPS_CORNER, iters: int = BISECTION_ITERS,
                 capacity: int = 64):
        self.params = params
        self.eps_corner = eps_corner
        self.iters = iters
        self.path_index = path_index
        self._alloc(capacity)
        x0 = np.asarray(x0, dtype=float)
        self.phase, self.ref, self.n = _start_phase(
            float(x0[0]), float(x0[1]), params.delta, self._k, self._t, self._x, self._c)

    def _alloc(self, cap):
        self._k = np.empty(cap, np.int64)
        self._t = np.empty(cap)
        self._x = np.empty((cap, 2))
        self._c = np.empty(cap, np.int64)

    def _grow(self):
        k, t, x, c = self._k, self._t, self._x, self._c
        self._alloc(2 * k.size)
        self._k[: k.size], self._t[: k.size], self._x[: k.size], self._c[: k.size] = k, t, x, c

    def __call__(self, prev: ParticleState, new: ParticleState):
        observe_step(prev, new, self)

    @property
    def log(self) -> CrossingLog:
        n = self.n
        return CrossingLog.from_arrays(self._k[:n], self._t[:n], self._x[:n], self._c[:n],
                                       self.path_index)


def observe_step(prev: ParticleState, new: ParticleState, obs: CrossingObserver) -> CrossingObserver:
    """Scan the step ``prev -> new`` for events and append them to ``obs``."""
    while True:
        # reserve room for the worst case of a handful of events per step
        if obs.n + 8 > obs._k.size:
            obs._grow()
            continue
        phase, ref, n = _scan_segment(
            float(prev.pos[0]), float(prev.pos[1]), float(new.pos[0]), float(new.pos[1]),
            float(prev.t), float(new.t), obs.phase, obs.ref, obs.params.delta,
            obs.eps_corner, obs.iters, obs._k, obs._t, obs._x, obs._c, obs.n)
        if n <= obs._k.size:
            obs.phase, obs.ref, obs.n = phase, ref, n
            return obs
        obs._grow()


def classify_hit_coordinate(pos, eps_corner: float = EPS_CORNER) -> int | None:
    """Which coordinate sits on the lattice ``pi Z`` at a separatrix hit.

    Returns 1 or 2, or ``None`` when both coordinates are within
    ``eps_corner`` of the lattice (a corner hit).
    """
    c = _hit_coord(float(pos[0]), float(pos[1]), eps_corner)
    return None if c == COORD_AMBIGUOUS else int(c)


def logged_path(x0, grid, policy: StepPolicy, seed: int, path_index: int,
                params: FlowParams, eps_corner: float = EPS_CORNER,
                iters: int = BISECTION_ITERS, capacity: int = 256):
    """Positions on ``grid`` and the crossing log of one compiled path."""
    grid = np.asarray(grid, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    out = np.empty((grid.size, 2))
    while True:
        k = np.empty(capacity, np.int64)
        t = np.empty(capacity)
        x = np.empty((capacity, 2))
        c = np.empty(capacity, np.int64)
        n = _logged_path(path_generator(seed, path_index), float(x0[0]), float(x0[1]),
                         params.A, policy.dt(params), params.delta, eps_corner, iters,
                         grid, out, k, t, x, c)
        if n <= capacity:
            return out, CrossingLog.from_arrays(k[:n], t[:n], x[:n], c[:n], path_index)
        capacity = 2 * n


def probe_exit(x0, target: ProbeTarget, params: FlowParams, policy: StepPolicy,
               seed: int, path_index: int, t_cap: float = 1.0,
               iters: int = BISECTION_ITERS) -> ProbeResult:
    """Run one path until it leaves the region named by ``target``.

    Raises
    ------
    ProbeTimeout
        If the region is not left before ``t_cap``.
    """
    x0 = np.asarray(x0, dtype=float)
    st, t, p1, p2 = _probe(path_generator(seed, path_index), float(x0[0]), float(x0[1]),
                           params.A, policy.dt(params), float(t_cap), int(target),
                           params.delta, params.beta0, params.beta0_prime, iters)
    if st == 1:
        raise ProbeTimeout(f"no exit before t_cap = {t_cap} (path {path_index})")
    corner = int(target) == ProbeTarget.EXIT_EDGE_REGION and abs(_h(p1, p2)) < params.delta
    return ProbeResult(float(t), (float(p1), float(p2)), bool(corner))


def probe_ensemble(x0, target: ProbeTarget, params: FlowParams, policy: StepPolicy,
                   seed: int, path_indices, t_cap: float = 1.0,
                   iters: int = BISECTION_ITERS) -> np.ndarray:
    """Vectorised :func:`probe_exit` over path indices.

    Returns an array with columns ``(timed_out, t, x1, x2, corner_entry)``;
    timed-out rows are kept and flagged instead of raising.
    """
    idx = np.asarray(path_indices, dtype=np.int64)
    x0 = np.asarray(x0, dtype=float)
    out = np.empty((idx.size, 5))
    dt = policy.dt(params)
    for j, pi in enumerate(idx):
        st, t, p1, p2 = _probe(path_generator(seed, int(pi)), float(x0[0]), float(x0[1]),
                               params.A, dt, float(t_cap), int(target), params.delta,
                               params.beta0, params.beta0_prime, iters)
        out[j, :4] = st, t, p1, p2
    out[:, 4] = (int(target) == ProbeTarget.EXIT_EDGE_REGION) & (
        np.abs(np.sin(out[:, 2]) * np.sin(out[:, 3])) < params.delta) & (out[:, 0] == 0)
    return out
