"""Experiment orchestration: dispatch a config, write tables and the manifest."""
from __future__ import annotations

import json
import math
import traceback
from pathlib import Path

import numpy as np

from . import analytic_bounds, cellpde
from .cellpde import SolverError, SupersolutionCandidate
from .config import ConfigError, ExperimentConfig, lambda_grid, output_root
from .crossing_events import ProbeTimeout, EventKind
from .ensemble_stats import (batch_means_se, cdf_sandwich, coordinate_balance, crossing_cdf,
                             fit_regimes, loglog_slope, variance_curve)
from .flowfield import FlowParams, hamiltonian
from .montecarlo import run_ensemble, run_probes
from .persist import OutputWriter, RunManifest
from .sde_engine import StepPolicy, simulate_grid

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_PROBE_TIMEOUT = 4
EXIT_CHECK_FAILED = 5

ERROR_CODES = {ConfigError: EXIT_CONFIG, SolverError: EXIT_SOLVER, ProbeTimeout: EXIT_PROBE_TIMEOUT}


class CheckFailed(RuntimeError):
    """A self-checking experiment produced FAIL rows."""


def error_code(exc: BaseException) -> int:
    for cls, code in ERROR_CODES.items():
        if isinstance(exc, cls):
            return code
    if isinstance(exc, CheckFailed):
        return EXIT_CHECK_FAILED
    return EXIT_INTERNAL


def error_record(exc: BaseException, config_hash: str | None = None) -> dict:
    return {"code": error_code(exc), "error": type(exc).__name__, "message": str(exc),
            "config_hash": config_hash}


def resolve_output_dir(cfg: ExperimentConfig, root=None) -> Path:
    out = Path(cfg.output_dir)
    return out if out.is_absolute() else Path(root or output_root()) / out


def run(cfg: ExperimentConfig, root=None) -> RunManifest:
    """Run one experiment and write its outputs.

    On failure an ``error.json`` record is written next to the partial
    outputs and the exception propagates; :func:`error_code` maps it to the
    process exit status.
    """
    out = resolve_output_dir(cfg, root)
    w = OutputWriter(out, cfg.config_hash(), cfg.kind)
    (out / "error.json").unlink(missing_ok=True)
    try:
        summary = _DISPATCH[cfg.kind](cfg, w)
    except Exception as exc:
        rec = error_record(exc, cfg.config_hash())
        rec["traceback"] = traceback.format_exc()
        (out / "error.json").write_text(json.dumps(rec, indent=2))
        w.finish(status=f"error:{rec['code']}")
        raise
    return w.finish("ok", summary)


# ---------------------------------------------------------------------------
# experiments


def _variance(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    opts = cfg.options
    var_rows, fit_rows, ev_rows = [], [], []
    summary = {}
    for j, x0 in enumerate(cfg.start_points()):
        run_ = run_ensemble(x0, cfg.times, cfg.params, cfg.policy, cfg.seed, cfg.paths,
                            path_index_offset=j * cfg.paths, log_events=True, workers=cfg.workers)
        s = variance_curve(run_)
        for k, t in enumerate(s.times):
            var_rows.append((j, t, s.msd[k], s.msd_se[k], s.centered_var[k], s.msd_coord[k, 0],
                             s.msd_coord[k, 1], s.mean_crossings[k], s.mean_crossings_se[k]))
        fit_rows += _fit_rows(j, s.times, s.msd)
        if opts.get("write_events"):
            names = {int(k): k.name for k in EventKind}
            for e in range(run_.ev_t.size):
                ev_rows.append((j, int(run_.path_index[run_.ev_path[e]]),
                                names[int(run_.ev_kind[e])], run_.ev_t[e], run_.ev_pos[e, 0],
                                run_.ev_pos[e, 1], int(run_.ev_coord[e])))
        summary[f"start{j}_msd_final"] = float(s.msd[-1])
    w.table("variance", ("start", "t", "msd", "msd_se", "centered_var", "msd_x1", "msd_x2",
                         "mean_crossings", "mean_crossings_se"), var_rows,
            "msd is E|X_t - x0|^2 with batch-means standard error")
    w.table("fits", ("start", "fit", "window_lo", "window_hi", "slope", "slope_ci", "intercept",
                     "r2", "n_points"), fit_rows)
    if opts.get("write_events"):
        w.table("events", ("start", "path_index", "kind", "t", "x1", "x2", "coord"), ev_rows)
    return summary


def _fit_rows(j, times, msd):
    rows = []
    try:
        early, late = fit_regimes(times, msd)
        rows.append((j, "msd_squared_linear_early", *early.window, early.slope, early.slope_ci,
                     early.intercept, early.r2, early.n_points))
        rows.append((j, "msd_linear_late", *late.window, late.slope, late.slope_ci,
                     late.intercept, late.r2, late.n_points))
    except ValueError:
        pass
    for win in ((0.002, 0.015), (0.01, 0.04)):
        try:
            f = loglog_slope(times, msd, win)
        except ValueError:
            continue
        rows.append((j, "loglog_slope", *f.window, f.slope, f.slope_ci, f.intercept, f.r2,
                     f.n_points))
    return rows


def _crossing(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    opts = cfg.options
    i, ns, alpha = opts["coordinate"], opts["n_values"], opts["alpha"]
    cdf_rows, sum_rows = [], []
    delta = cfg.params.delta
    for j, x0 in enumerate(cfg.start_points()):
        run_ = run_ensemble(x0, cfg.times, cfg.params, cfg.policy, cfg.seed, cfg.paths,
                            path_index_offset=j * cfg.paths, workers=cfg.workers)
        even = np.flatnonzero(run_.path_index % 2 == 0)
        odd = np.flatnonzero(run_.path_index % 2 == 1)
        sw = cdf_sandwich(run_.subset(even), run_.subset(odd), i, ns, cfg.times, alpha)
        for n in ns:
            cdf, eps = crossing_cdf(run_, i, n, cfg.times, alpha)
            up = (analytic_bounds.erf_upper_cdf(n, delta, sw.c_upper, cfg.times)
                  if sw.c_upper > 0 else np.zeros_like(cfg.times))
            lo = (analytic_bounds.log_lower_cdf(n, delta, sw.c_lower, cfg.times)
                  if sw.c_lower > 0 else np.ones_like(cfg.times))
            for k, t in enumerate(cfg.times):
                cdf_rows.append((j, n, t, cdf[k], eps, up[k], lo[k]))
        p1, p2, pa, ne = coordinate_balance(run_)
        sum_rows.append((j, x0[0], x0[1], sw.c_upper, sw.c_lower, sw.eps, sw.max_upper_violation,
                         sw.max_lower_violation, sw.passed, p1, p2, pa, ne))
    w.table("crossing_cdf", ("start", "n", "t", "cdf", "dkw_eps", "erf_upper", "log_lower"),
            cdf_rows)
    w.table("crossing_summary", ("start", "x1", "x2", "c_upper", "c_lower", "dkw_eps",
                                 "upper_violation", "lower_violation", "passed", "p_coord1",
                                 "p_coord2", "p_ambiguous", "n_first_hits"), sum_rows)
    return {"passed": all(r[8] for r in sum_rows)}


def _probe(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    opts = cfg.options
    starts = cfg.start_points()
    probes = run_probes(starts, opts["target"], cfg.params, cfg.policy, cfg.seed, cfg.paths,
                        opts["t_cap"])
    n_to = sum(int(p[:, 0].sum()) for p in probes)
    if n_to and opts.get("on_timeout", "error") == "error":
        raise ProbeTimeout(f"{n_to} probes did not exit before t_cap = {opts['t_cap']}")
    d = cfg.params.delta
    scale = d * d * abs(math.log(d))
    rows, raw = [], []
    for j, (x0, pr) in enumerate(zip(starts, probes)):
        ok = pr[:, 0] == 0
        idx = np.arange(j * cfg.paths, (j + 1) * cfg.paths)
        if ok.any():
            mt, se = batch_means_se(pr[ok, 1], idx[ok])
            cf = float(pr[ok, 4].mean())
        else:
            mt, se, cf = math.nan, math.nan, math.nan
        n = int(ok.sum())
        cse = math.sqrt(cf * (1 - cf) / n) if n else math.nan
        rows.append((j, x0[0], x0[1], n, int((~ok).sum()), float(mt), float(se),
                     float(mt) / scale, cf, cse))
        for k in range(pr.shape[0]):
            raw.append((j, int(idx[k]), int(pr[k, 0]), pr[k, 1], pr[k, 2], pr[k, 3], int(pr[k, 4])))
    w.table("probe_summary", ("start", "x1", "x2", "n_exited", "n_timeout", "mean_exit_time",
                              "mean_exit_time_se", "mean_over_delta2_logdelta", "corner_entry",
                              "corner_entry_se"), rows)
    w.table("probes", ("start", "path_index", "timed_out", "t", "x1", "x2", "corner_entry"), raw)
    return {"timeouts": n_to}


def _pde(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    opts = cfg.options
    A = cfg.params.A
    grid = cellpde.PeriodicGrid(opts["pde_n"]) if opts["pde_n"] else cellpde.PeriodicGrid.for_peclet(A)
    problem = opts["problem"]
    summary: dict = {"problem": problem, "n": grid.n}
    if problem == "chi":
        scheme = opts["scheme"] or "central"
        c1, c2, D, info = cellpde.solve_chi(A, grid, scheme)
        row = [A, D[0, 0], D[1, 1], D[0, 1], grid.n, max(i.residual_max for i in info)]
        cols = ["A", "D11", "D22", "D12", "resolution", "residual_max"]
        if opts["richardson"] and A > 0:
            rep = cellpde.deff_richardson(A, grid, scheme=scheme)
            row += [rep.D_fine, rep.rel_diff, rep.under_resolved]
            cols += ["D11_2n", "richardson_rel_diff", "under_resolved"]
            summary["under_resolved"] = rep.under_resolved
        w.table("deff", cols, [row])
        if opts["write_fields"]:
            for f in (c1, c2):
                w.table(f.name, ("i", "j", "x1", "x2", "value"), f.records())
        summary["D11"] = float(D[0, 0])
    elif problem == "exit":
        scheme = opts["scheme"] or "sg"
        fields = cellpde.solve_exit_all(A, grid, scheme)
        pts = cellpde.mid_edge_layer_points(cfg.params.delta)
        rows = []
        for start, p in pts.items():
            for edge, f in fields.items():
                rows.append((start, p[0], p[1], edge, float(f.interpolator()([p])[0])))
        m = grid.n // 2
        total = sum(f.values for f in fields.values())[1:m, 1:m]
        dev = float(np.abs(total - 1.0).max())
        lo = min(float(f.values.min()) for f in fields.values())
        hi = max(float(f.values.max()) for f in fields.values())
        w.table("exit_mid_edge", ("start_side", "x1", "x2", "exit_edge", "probability"), rows)
        w.table("exit_checks", ("A", "resolution", "scheme", "sum_deviation", "min", "max"),
                [(A, grid.n, scheme, dev, lo, hi)])
        if opts["write_fields"]:
            for f in fields.values():
                w.table(f.name.replace("(", "_").replace(")", ""), ("i", "j", "x1", "x2", "value"),
                        f.records())
        summary["sum_deviation"] = dev
    else:
        scheme = opts["scheme"] or "sg"
        lams = opts["lambdas"] or list(lambda_grid(A))
        d = cfg.params.delta
        rows = []
        for lam in lams:
            f = cellpde.solve_resolvent(A, lam, grid, scheme)
            s = cellpde.sup_on_layer(f, d)
            rows.append((A, lam, grid.n, scheme, s, s * math.sqrt(lam) / (d * abs(math.log(d))),
                         float(f.values.min()), float(f.values.max()) * lam))
            if opts["write_fields"]:
                w.table(f"resolvent_{lam:g}", ("i", "j", "x1", "x2", "value"), f.records())
        w.table("resolvent", ("A", "lambda", "resolution", "scheme", "sup_layer",
                              "normalised_sup", "min", "max_times_lambda"), rows)
    return summary


def _audit(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    opts = cfg.options
    names = opts["candidates"] or list(cellpde.CANDIDATES)
    rows = []
    base = cfg.params
    for A in opts["A_values"]:
        params = FlowParams(A, base.N, base.beta0, base.beta0_prime) if base else FlowParams(A)
        for name in names:
            r = cellpde.verify_supersolution(SupersolutionCandidate(name), A, params)
            rows.append((A, name, r.min_residual, r.required, "PASS" if r.passed else "FAIL",
                         json.dumps(r.checks, sort_keys=True, default=str)))
    w.table("supersolution_audit", ("A", "candidate", "min_residual", "required", "result",
                                    "details"), rows)
    n_fail = sum(r[4] == "FAIL" for r in rows)
    if n_fail:
        raise CheckFailed(f"{n_fail} super-solution audits failed")
    return {"n_checks": len(rows)}


def _selftest(cfg: ExperimentConfig, w: OutputWriter) -> dict:
    rows = analytic_bounds.selftest(cfg.seed)
    w.table("selftest", ("check", "value", "tolerance", "result"),
            [(r.check, r.value, r.tolerance, "PASS" if r.passed else "FAIL") for r in rows])
    n_fail = sum(not r.passed for r in rows)
    if n_fail:
        raise CheckFailed(f"{n_fail} analytic self-tests failed")
    return {"n_checks": len(rows)}


_DISPATCH = {
    "variance_curve": _variance,
    "crossing_cdf": _crossing,
    "exit_probe": _probe,
    "cell_pde": _pde,
    "supersolution_audit": _audit,
    "bounds_selftest": _selftest,
}


# ---------------------------------------------------------------------------
# figure bundle


SNAPSHOT_TIMES = (0.004, 0.012, 0.040)


def reproduce_figures(out_dir=None, seed: int = 2024, paths: int = 10_000, A: float = 1000.0,
                      n_trajectories: int = 3, t_traj: float = 2.0, workers: int = 1) -> RunManifest:
    """Variance table with regime fits, long trajectories and cloud snapshots.

    Tables written: ``variance``, ``fits``, ``trajectories``,
    ``trajectory_dwell``, ``snapshots`` and ``snapshot_summary``.
    """
    import hashlib

    params = FlowParams(A)
    policy = StepPolicy()
    recipe = {"A": A, "seed": seed, "paths": paths, "n_trajectories": n_trajectories,
              "t_traj": t_traj, "policy": [policy.dt_drift_frac, policy.dt_layer_frac,
                                           policy.dt_max]}
    chash = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()
    out = Path(out_dir) if out_dir else output_root() / "figures"
    w = OutputWriter(out, chash, "figures")
    delta = params.delta

    times = np.round(np.arange(1, 41) * 1e-3, 12)
    run_ = run_ensemble((0.0, 0.0), times, params, policy, seed, paths, workers=workers)
    s = variance_curve(run_)
    w.table("variance", ("t", "msd", "msd_se", "centered_var", "mean_crossings"),
            [(t, s.msd[k], s.msd_se[k], s.centered_var[k], s.mean_crossings[k])
             for k, t in enumerate(s.times)])
    w.table("fits", ("start", "fit", "window_lo", "window_hi", "slope", "slope_ci", "intercept",
                     "r2", "n_points"), _fit_rows(0, s.times, s.msd))

    snap_rows, snap_sum = [], []
    for ts in SNAPSHOT_TIMES:
        k = int(np.argmin(np.abs(times - ts)))
        pos = run_.positions[:, k]
        inl = np.abs(hamiltonian(pos)) < delta
        snap_sum.append((ts, float(inl.mean()), paths))
        for r in range(paths):
            snap_rows.append((ts, int(run_.path_index[r]), pos[r, 0], pos[r, 1], int(inl[r])))
    w.table("snapshots", ("t", "path_index", "x1", "x2", "in_layer"), snap_rows)
    w.table("snapshot_summary", ("t", "layer_fraction", "paths"), snap_sum)

    tgrid = np.round(np.arange(1, int(round(t_traj / 1e-3)) + 1) * 1e-3, 12)
    traj_rows, dwell = [], []
    x0 = np.zeros(2)
    for j in range(n_trajectories):
        pos = simulate_grid(x0, tgrid, policy, seed + 1, j, params)
        h = hamiltonian(pos)
        for k, t in enumerate(tgrid):
            traj_rows.append((j, t, pos[k, 0], pos[k, 1], h[k]))
        dwell.append((j, x0[0], x0[1], float(np.mean(np.abs(h) > delta))))
    w.table("trajectories", ("trajectory", "t", "x1", "x2", "h"), traj_rows)
    w.table("trajectory_dwell", ("trajectory", "x1_0", "x2_0", "fraction_outside_layer"), dwell)
    return w.finish("ok", {"snapshot_layer_fraction": [r[1] for r in snap_sum],
                           "dwell_fraction": [r[3] for r in dwell]})


__all__ = ["run", "reproduce_figures", "error_code", "error_record", "CheckFailed",
           "EXIT_OK", "EXIT_INTERNAL", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_PROBE_TIMEOUT",
           "EXIT_CHECK_FAILED"]
