"""Ensemble drivers: many independent paths with positions and event logs.

Path ``k`` of a run always draws from the generator keyed by
``(seed, path_index_offset + k)``.  Worker processes only change which
process computes a path, never its noise or its batch, so the results are
identical for any worker count.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .crossing_events import (BISECTION_ITERS, EPS_CORNER, CrossingLog, _logged_path,
                              probe_ensemble)
from .flowfield import FlowParams
from .sde_engine import StepPolicy, _advance_grid, path_generator


@dataclass
class EnsembleRun:
    """Positions on a time grid plus flattened event records.

    Attributes
    ----------
    positions : ndarray, shape (paths, len(grid), 2)
    path_index : ndarray of int
        Global path indices (noise keys) of the rows of ``positions``.
    ev_path : ndarray of int
        Row number (not global index) of the path owning each event.
    ev_kind, ev_t, ev_pos, ev_coord : ndarray
        Event kind code, time, position and coordinate label.
    """

    x0: np.ndarray
    grid: np.ndarray
    params: FlowParams
    policy: StepPolicy
    seed: int
    positions: np.ndarray
    path_index: np.ndarray
    ev_path: np.ndarray
    ev_kind: np.ndarray
    ev_t: np.ndarray
    ev_pos: np.ndarray
    ev_coord: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.positions.shape[0]

    def log(self, row: int) -> CrossingLog:
        sel = self.ev_path == row
        return CrossingLog.from_arrays(self.ev_kind[sel], self.ev_t[sel], self.ev_pos[sel],
                                       self.ev_coord[sel], int(self.path_index[row]))

    def logs(self) -> list[CrossingLog]:
        return [self.log(r) for r in range(self.n_paths)]

    def subset(self, rows) -> "EnsembleRun":
        rows = np.asarray(rows)
        remap = -np.ones(self.n_paths, dtype=np.int64)
        remap[rows] = np.arange(rows.size)
        keep = remap[self.ev_path] >= 0
        return EnsembleRun(self.x0, self.grid, self.params, self.policy, self.seed,
                           self.positions[rows], self.path_index[rows],
                           remap[self.ev_path[keep]], self.ev_kind[keep], self.ev_t[keep],
                           self.ev_pos[keep], self.ev_coord[keep])


def _chunk(args):
    (x0, grid, A, N, b0, b0p, policy, seed, start, stop, log_events, eps_corner, iters) = args
    params = FlowParams(A, N, b0, b0p)
    dt = policy.dt(params)
    n = stop - start
    pos = np.empty((n, grid.size, 2))
    evp, evk, evt, evx, evc = [], [], [], [], []
    cap = 256
    kb = np.empty(cap, np.int64)
    tb = np.empty(cap)
    xb = np.empty((cap, 2))
    cb = np.empty(cap, np.int64)
    for r in range(n):
        gen_index = start + r
        if not log_events:
            _advance_grid(path_generator(seed, gen_index), x0[0], x0[1], A, dt, grid, pos[r])
            continue
        while True:
            m = _logged_path(path_generator(seed, gen_index), x0[0], x0[1], A, dt,
                             params.delta, eps_corner, iters, grid, pos[r], kb, tb, xb, cb)
            if m <= cap:
                break
            cap = 2 * m
            kb = np.empty(cap, np.int64)
            tb = np.empty(cap)
            xb = np.empty((cap, 2))
            cb = np.empty(cap, np.int64)
        evp.append(np.full(m, r, np.int64))
        evk.append(kb[:m].copy())
        evt.append(tb[:m].copy())
        evx.append(xb[:m].copy())
        evc.append(cb[:m].copy())
    if not log_events:
        return pos, None
    return pos, (np.concatenate(evp), np.concatenate(evk), np.concatenate(evt),
                 np.concatenate(evx), np.concatenate(evc))


def run_ensemble(x0, grid, params: FlowParams, policy: StepPolicy, seed: int, n_paths: int,
                 path_index_offset: int = 0, log_events: bool = True, workers: int = 1,
                 eps_corner: float = EPS_CORNER, iters: int = BISECTION_ITERS) -> EnsembleRun:
    """Simulate ``n_paths`` paths from ``x0`` recording positions on ``grid``.

    Parameters
    ----------
    grid : array_like
        Strictly increasing positive checkpoint times.
    workers : int
        Number of processes; 1 runs in-process.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or grid[0] <= 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be positive and strictly increasing")
    x0 = np.asarray(x0, dtype=float).reshape(2)
    n_chunks = max(1, int(workers)) * 4 if workers > 1 else 1
    bounds = np.linspace(0, n_paths, n_chunks + 1).astype(int)
    jobs = [(x0, grid, params.A, params.N, params.beta0, params.beta0_prime, policy, seed,
             path_index_offset + lo, path_index_offset + hi, log_events, eps_corner, iters)
            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=int(workers)) as ex:
            parts = list(ex.map(_chunk, jobs))
    else:
        parts = [_chunk(j) for j in jobs]
    positions = np.concatenate([p[0] for p in parts])
    if log_events:
        offsets = np.cumsum([0] + [p[0].shape[0] for p in parts[:-1]])
        ev = [np.concatenate([p[1][k] + (off if k == 0 else 0) for p, off in zip(parts, offsets)])
              for k in range(5)]
    else:
        ev = [np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0), np.empty((0, 2)),
              np.empty(0, np.int64)]
    return EnsembleRun(x0, grid, params, policy, int(seed), positions,
                       np.arange(path_index_offset, path_index_offset + n_paths),
                       ev[0], ev[1], ev[2], ev[3], ev[4])


def run_probes(starts, target, params: FlowParams, policy: StepPolicy, seed: int,
               n_paths: int, t_cap: float = 1.0) -> list[np.ndarray]:
    """Probe ensembles from each start; start ``j`` uses path indices ``j * n_paths + k``."""
    out = []
    for j, x0 in enumerate(np.atleast_2d(starts)):
        idx = np.arange(j * n_paths, (j + 1) * n_paths)
        out.append(probe_ensemble(x0, target, params, policy, seed, idx, t_cap))
    return out
