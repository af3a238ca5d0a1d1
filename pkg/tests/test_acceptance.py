"""Acceptance criteria 1-13.

Each test records one ``criterion k: PASS/FAIL`` line (printed immediately
and repeated in the terminal summary) and then asserts the outcome.
Criteria that fail for substantive reasons are left failing.
"""
import math
import time

import numpy as np
import pytest

from cellflow import cellpde
from cellflow.analytic_bounds import selftest
from cellflow.cellpde import SupersolutionCandidate, verify_supersolution
from cellflow.crossing_events import ProbeTarget
from cellflow.ensemble_stats import (cdf_sandwich, common_constant,
                                     corner_reentry_estimate, fit_regimes, fit_sandwich,
                                     layer_exit_times, loglog_slope, sandwich_window,
                                     telescoping_check, variance_curve)
from cellflow.flowfield import FlowParams, edge_mesh, layer16_mesh
from cellflow.montecarlo import run_ensemble, run_probes
from cellflow.sde_engine import StepPolicy

SEED = 20240601
POLICY = StepPolicy()
SANDWICH_A = (400.0, 1600.0, 6400.0)


# ---------------------------------------------------------------------------
# shared ensembles


@pytest.fixture(scope="module")
def corner_run():
    """A = 1000, 10^4 paths from the corner (0, 0), grid 0.001 .. 0.04."""
    t0 = time.perf_counter()
    times = np.round(np.arange(1, 41) * 1e-3, 12)
    run = run_ensemble((0.0, 0.0), times, FlowParams(1000.0), POLICY, SEED, 10_000)
    return run, time.perf_counter() - t0


@pytest.fixture(scope="module")
def layer_runs():
    """Layer-mesh ensembles for A in {400, 1600, 6400}, 300 paths per start."""
    t0 = time.perf_counter()
    times = np.round(np.arange(1, 51) * 1e-3, 12)
    out = {}
    for A in SANDWICH_A:
        params = FlowParams(A)
        out[A] = [run_ensemble(x0, times, params, POLICY, SEED + 1, 300, path_index_offset=j * 300)
                  for j, x0 in enumerate(layer16_mesh(params))]
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_diffusion_calibration(record_criterion):
    t0 = time.perf_counter()
    times = np.array([0.25, 0.5, 1.0])
    run = run_ensemble((0.0, 0.0), times, FlowParams(0.0), POLICY, SEED, 100_000,
                       log_events=False)
    s = variance_curve(run)
    elapsed = time.perf_counter() - t0
    z = (s.msd - 4 * times) / s.msd_se
    ok = bool(np.all(np.abs(z) <= 3) and elapsed < 60)
    record_criterion(1, ok, f"E|X_t-x|^2 = {np.round(s.msd, 4).tolist()} vs 4t, "
                            f"z = {np.round(z, 2).tolist()}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_variance_regimes(corner_run, record_criterion):
    run, elapsed = corner_run
    s = variance_curve(run)
    early, late = fit_regimes(s.times, s.msd, changeover=0.015, t_max=0.04)
    ok = early.r2 >= 0.95 and late.r2 >= 0.95 and elapsed < 600
    record_criterion(2, ok, f"R^2 of (Var)^2 ~ t on t<0.015: {early.r2:.3f}; R^2 of Var ~ t on "
                            f"[0.015, 0.04]: {late.r2:.3f}; {elapsed:.1f}s")
    assert ok


def test_criterion_03_anomalous_exponent(corner_run, record_criterion):
    run, _ = corner_run
    s = variance_curve(run)
    fit = loglog_slope(s.times, s.msd, (0.002, 0.015))
    late = loglog_slope(s.times, s.msd, (0.01, 0.04))
    ok = 0.4 <= fit.slope <= 0.6
    record_criterion(3, ok, f"log-log slope on [0.002, 0.015] = {fit.slope:.3f} "
                            f"(diagnostic: slope on [0.01, 0.04] = {late.slope:.3f})")
    assert ok


def test_criterion_04_variance_sandwich(layer_runs, record_criterion):
    runs, elapsed = layer_runs
    train, valid = {}, {}
    for A, per_start in runs.items():
        d = FlowParams(A).delta
        for j, run in enumerate(per_start):
            even = np.flatnonzero(run.path_index % 2 == 0)
            odd = np.flatnonzero(run.path_index % 2 == 1)
            train[(A, j)] = (d, run.grid, variance_curve(run.subset(even)).msd)
            sv = variance_curve(run.subset(odd))
            valid[(A, j)] = (d, run.grid, sv.msd, sv.msd_se)
    fit = fit_sandwich(train, t_max=0.05, factor=1.0)
    c = fit.c_hat
    worst = 0.0
    for key, (d, t, msd, se) in valid.items():
        lo, hi = sandwich_window(d, 0.05, 1.0)
        sel = (t >= lo) & (t <= hi)
        q, qse = msd[sel] * d / np.sqrt(t[sel]), se[sel] * d / np.sqrt(t[sel])
        lower = 1.0 / (c * abs(math.log(d)))
        worst = max(worst, float(np.max((q - c) / qse)), float(np.max((lower - q) / qse)))
    ok = fit.passed and worst <= 3.0 and elapsed < 1800
    qs = {A: (min(v["q_min"] for k, v in fit.per_A.items() if k[0] == A),
              max(v["q_max"] for k, v in fit.per_A.items() if k[0] == A)) for A in SANDWICH_A}
    record_criterion(4, ok, f"c_hat = {c:.2f}; Var*delta/sqrt(t) range per A = "
                            f"{ {A: tuple(round(x, 2) for x in r) for A, r in qs.items()} }; "
                            f"held-out worst excursion {worst:.2f} SE; {elapsed:.1f}s")
    assert ok


def test_criterion_05_crossing_cdf_sandwich(record_criterion):
    params = FlowParams(1000.0)
    grid = np.round(np.arange(1, 21) * 0.005, 12)
    run = run_ensemble((0.0, math.pi / 2), grid, params, POLICY, SEED + 2, 4000)
    even = np.flatnonzero(run.path_index % 2 == 0)
    odd = np.flatnonzero(run.path_index % 2 == 1)
    sw = cdf_sandwich(run.subset(even), run.subset(odd), 1, [1, 2, 4], grid)
    ok = sw.passed and sw.bounds_ordered
    record_criterion(5, ok, f"c_upper = {sw.c_upper:.3f}, c_lower = {sw.c_lower:.3f}; held-out "
                            f"violations upper {sw.max_upper_violation:.4f}, lower "
                            f"{sw.max_lower_violation:.4f} vs band {sw.eps:.4f}")
    assert ok


def test_criterion_06_layer_exit_scaling(layer_runs, record_criterion):
    runs, _ = layer_runs
    ratios, censored = [], []
    for A in SANDWICH_A:
        d = FlowParams(A).delta
        sig = np.concatenate([layer_exit_times(r, 1) for r in runs[A]])
        censored.append(float(np.isnan(sig).mean()))
        ratios.append(float(np.nanmean(sig)) / (d * d * abs(math.log(d))))
    c, spread, ok = common_constant(ratios, max_ratio=2.0, cap=20.0)
    ok = ok and max(censored) == 0.0
    record_criterion(6, ok, f"mean sigma_1/(delta^2|ln delta|) = {np.round(ratios, 3).tolist()}, "
                            f"common constant {c:.3f}, max/min {spread:.2f}, "
                            f"censored {censored}")
    assert ok


def test_criterion_07_corner_reentry(record_criterion):
    rows, ok = [], True
    for A in SANDWICH_A:
        params = FlowParams(A)
        probes = run_probes(edge_mesh(params), ProbeTarget.EXIT_EDGE_REGION, params, POLICY,
                            SEED + 3, 400, t_cap=1.0)
        n_to = sum(int(p[:, 0].sum()) for p in probes)
        r = corner_reentry_estimate(probes)
        ok &= (r.p0 + 3 * r.se < 1.0) and n_to == 0
        rows.append(f"A={A:g}: P0={r.p0:.3f}+3*{r.se:.3f}")
    record_criterion(7, ok, "; ".join(rows))
    assert ok


def test_criterion_08_effective_diffusivity(record_criterion):
    t0 = time.perf_counter()
    _, _, D0, _ = cellpde.solve_chi(0.0)
    zero_ok = np.allclose(D0, 2 * np.eye(2), atol=1e-10)
    As = np.array([100.0, 400.0, 1600.0, 6400.0])
    reps = [cellpde.deff_richardson(A) for A in As]
    D = np.array([r.D_coarse for r in reps])
    slope = np.polyfit(np.log(As), np.log(D), 1)[0]
    resolved = not any(r.under_resolved for r in reps)
    resid = max(r.residual_max for r in reps)
    sym = all(abs(r.D_matrix[0, 0] - r.D_matrix[1, 1]) <= 0.01 * r.D_matrix[0, 0]
              and abs(r.D_matrix[0, 1]) < 0.01 * r.D_matrix[0, 0] for r in reps)
    elapsed = time.perf_counter() - t0
    ok = zero_ok and resolved and 0.4 <= slope <= 0.6 and resid < 1e-8 and sym and elapsed < 900
    record_criterion(8, ok, f"D11 = {np.round(D, 2).tolist()} (n = {[r.n for r in reps]}), "
                            f"Richardson diffs {[round(r.rel_diff, 4) for r in reps]}, "
                            f"slope {slope:.3f}, A=0 -> 2I: {zero_ok}; {elapsed:.1f}s")
    assert ok


def test_criterion_09_four_edge_exit(record_criterion):
    A = 1600.0
    fields = cellpde.solve_exit_all(A)
    m = cellpde.PeriodicGrid.for_peclet(A).n // 2
    total = sum(f.values for f in fields.values())[1:m, 1:m]
    sum_dev = float(np.abs(total - 1).max())

    def table(N):
        pts = cellpde.mid_edge_layer_points(FlowParams(A, N).delta)
        return {s: {e: float(f.interpolator()([p])[0]) for e, f in fields.items()}
                for s, p in pts.items()}

    probs = table(1.0)
    worst = max(abs(v - 0.25) for row in probs.values() for v in row.values())
    ok = worst <= 0.05 and sum_dev < 1e-8
    scan = {N: round(max(abs(v - 0.25) for row in table(N).values() for v in row.values()), 3)
            for N in (1.0, 2.0, 4.0, 8.0)}
    record_criterion(9, ok, f"from south mid-edge: "
                            f"{ {e: round(v, 3) for e, v in probs['S'].items()} }; worst |p-0.25| "
                            f"{worst:.3f}; sum deviation {sum_dev:.1e}; "
                            f"worst |p-0.25| by layer constant N: {scan}")
    assert ok


def test_criterion_10_resolvent_bound(record_criterion):
    A = 1600.0
    d = FlowParams(A).delta
    vals, inside = [], True
    for lam in (16.0, 64.0, 256.0):
        f = cellpde.solve_resolvent(A, lam)
        inside &= bool(f.values.min() >= -1e-12 and f.values.max() <= 1 / lam + 1e-12)
        vals.append(cellpde.sup_on_layer(f, d) * math.sqrt(lam) / (d * abs(math.log(d))))
    c, spread, ok = common_constant(vals, max_ratio=2.0)
    ok = ok and inside
    record_criterion(10, ok, f"sup phi*sqrt(lam)/(delta|ln delta|) for lam = 16, 64, 256: "
                             f"{np.round(vals, 3).tolist()}, max/min {spread:.2f}")
    assert ok


def test_criterion_11_analytic_selftests(record_criterion):
    t0 = time.perf_counter()
    rows = selftest()
    elapsed = time.perf_counter() - t0
    bad = [r.check for r in rows if not r.passed]
    ok = not bad and elapsed < 60
    record_criterion(11, ok, f"{len(rows)} checks, failures {bad}, {elapsed:.1f}s")
    assert ok


def test_criterion_12_supersolution_audit(record_criterion):
    ok, notes = True, []
    for A in (100.0, 400.0, 1600.0, 6400.0):
        r = verify_supersolution(SupersolutionCandidate("corner_g0g1"), A)
        ch = r.checks
        exact = abs(ch["reduced_at_xbar"] - 1.0) <= 1e-9 and abs(ch["inner_min"] - 1.0) <= 1e-9
        ok &= r.passed and exact and ch["glue_slope_ok"]
        notes.append(f"A={A:g}: min {r.min_residual:.9f}")
    p = verify_supersolution(SupersolutionCandidate("psi_plus", {"c0": 10.0, "t_max": 0.125}),
                             1000.0)
    ok &= p.passed
    record_criterion(12, ok, "corner_g0g1 " + "; ".join(notes)
                     + f"; psi_plus(c0=10, t<=1/8) min {p.min_residual:.2e}")
    assert ok


def test_criterion_13_telescoping_symmetry(record_criterion):
    # the default step leaves a visible bias in the first cross moment; see the
    # decision ledger. A quarter of the default drift fraction removes it.
    policy = StepPolicy(dt_drift_frac=0.0025)
    run = run_ensemble((0.0, 0.0), [0.04], FlowParams(1000.0), policy, 77, 40_000)
    zs = []
    for i in (1, 2):
        rep = telescoping_check(run, i, n_legs=6)
        zs.append(rep.cross[-1] / rep.cross_se[-1])
    z = np.concatenate(zs)
    ok = bool(np.all(np.abs(z) <= 3))
    record_criterion(13, ok, f"max |cross|/SE over 2 x 15 leg pairs at t = 0.04: "
                             f"{np.abs(z).max():.2f}")
    assert ok
