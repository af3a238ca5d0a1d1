import math

import numpy as np
import pytest

from cellflow.analytic_bounds import erf_upper_cdf, log_lower_cdf
from cellflow.ensemble_stats import (N_BATCHES, TimeGrid, batch_means_se, common_constant,
                                     coordinate_balance, corner_reentry_estimate, crossing_counts,
                                     dkw_epsilon, empirical_cdf, fit_lower_constant, fit_regimes,
                                     fit_sandwich, fit_upper_constant, layer_exit_times,
                                     leg_increments, linear_fit, loglog_slope, sandwich_window,
                                     tau_i_matrix, telescoping_check, variance_curve)
from cellflow.flowfield import FlowParams
from cellflow.montecarlo import run_ensemble
from cellflow.sde_engine import StepPolicy


@pytest.fixture(scope="module")
def small_run():
    grid = np.array([0.005, 0.01, 0.02])
    return run_ensemble((0.0, 0.0), grid, FlowParams(1000.0), StepPolicy(), 3, 200)


def test_time_grid_validation():
    assert np.allclose(TimeGrid.linear(1.0, 4).times, [0.25, 0.5, 0.75, 1.0])
    for bad in ([0.0, 1.0], [0.2, 0.1], []):
        with pytest.raises(ValueError):
            TimeGrid(np.array(bad))


def test_batch_means_against_manual():
    rng = np.random.default_rng(0)
    v = rng.normal(size=640)
    idx = np.arange(640)
    mean, se = batch_means_se(v, idx)
    bm = np.array([v[idx % N_BATCHES == b].mean() for b in range(N_BATCHES)])
    assert mean == pytest.approx(v.mean())
    assert se == pytest.approx(bm.std(ddof=1) / math.sqrt(N_BATCHES))


def test_dkw_and_ecdf():
    assert dkw_epsilon(1000, 0.05) == pytest.approx(math.sqrt(math.log(40) / 2000))
    s = np.array([0.1, 0.3, np.inf, 0.2])
    assert np.allclose(empirical_cdf(s, [0.05, 0.2, 1.0]), [0.0, 0.5, 0.75])


def test_constant_fits_recover_generating_constant():
    t = np.linspace(0.01, 0.2, 30)
    delta = 0.03
    cdf = erf_upper_cdf(2, delta, 0.8, t)
    assert fit_upper_constant(cdf, 2, delta, t) == pytest.approx(0.8, rel=1e-9)
    low = log_lower_cdf(2, delta, 0.6, t)
    sel = low > 0
    assert fit_lower_constant(low[sel], 2, delta, t[sel]) == pytest.approx(0.6, rel=1e-9)


def test_linear_and_loglog_fits():
    x = np.linspace(0, 1, 20)
    f = linear_fit(x, 3 * x + 1)
    assert f.slope == pytest.approx(3) and f.r2 == pytest.approx(1)
    t = np.geomspace(1e-3, 1e-1, 30)
    assert loglog_slope(t, 5 * np.sqrt(t), (1e-3, 1e-1)).slope == pytest.approx(0.5)
    with pytest.raises(ValueError):
        linear_fit(x, x, (0.5, 0.55))
    times = np.linspace(0.001, 0.04, 40)
    var = np.where(times < 0.015, np.sqrt(100 * times), 0.0) + np.where(times >= 0.015, 3 + 50 * times, 0)
    early, late = fit_regimes(times, var)
    assert early.r2 == pytest.approx(1) and late.slope == pytest.approx(50)


def test_sandwich_helpers():
    lo, hi = sandwich_window(0.05, 0.05, 25)
    assert lo == pytest.approx(25 * (0.05 * abs(math.log(0.05))) ** 2) and hi == 0.05
    t = np.linspace(0.001, 0.05, 50)
    curves = {"a": (0.05, t, 2.0 * np.sqrt(t) / 0.05), "b": (0.02, t, 3.0 * np.sqrt(t) / 0.02)}
    fit = fit_sandwich(curves, 0.05, 1.0)
    assert fit.passed and fit.c_hat == pytest.approx(3.0)
    assert not fit_sandwich(curves, 0.05, 25.0).passed
    assert common_constant([1.0, 1.5, 1.9]) == (1.9, 1.9, True)
    assert common_constant([1.0, 2.5])[2] is False
    assert common_constant([10.0, 15.0], cap=12.0)[2] is False


def test_variance_curve_on_real_run(small_run):
    s = variance_curve(small_run)
    disp = small_run.positions - small_run.x0
    assert np.allclose(s.msd, (disp**2).sum(-1).mean(0))
    assert np.all(s.msd_se > 0)
    logs = small_run.logs()
    for k, t in enumerate(small_run.grid):
        manual = np.mean([np.sum((lg.tau[1:] <= t)) for lg in logs])
        assert s.mean_crossings[k] == pytest.approx(manual)
    assert crossing_counts(small_run).shape == (200, 3)


def test_tau_matrix_and_layer_exits_match_logs(small_run):
    tau = tau_i_matrix(small_run, 1, 3)
    sig = layer_exit_times(small_run, 2)
    for r in range(20):
        lg = small_run.log(r)
        ti = lg.tau_i(1)[1:4]
        assert np.array_equal(tau[r, : ti.size], ti)
        assert np.all(np.isinf(tau[r, ti.size:]))
        s = lg.sigma
        assert (np.isnan(sig[r]) and s.size < 3) or sig[r] == s[2]


def test_telescoping_identity(small_run):
    legs = leg_increments(small_run, 1, 4)
    disp = small_run.positions[:, :, 0] - small_run.x0[0]
    assert np.allclose(legs.sum(-1), disp, atol=1e-12)
    rep = telescoping_check(small_run, 1, 4)
    assert np.allclose(rep.var - rep.sum_sq, 2 * rep.cross.sum(-1), atol=1e-12)


def test_worker_count_does_not_change_results():
    grid = np.array([0.004, 0.008])
    a = run_ensemble((0.1, 0.0), grid, FlowParams(400.0), StepPolicy(), 9, 24, workers=1)
    b = run_ensemble((0.1, 0.0), grid, FlowParams(400.0), StepPolicy(), 9, 24, workers=2)
    assert np.array_equal(a.positions, b.positions)
    for f in ("ev_path", "ev_kind", "ev_t", "ev_pos", "ev_coord"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_coordinate_balance_bounds(small_run):
    p1, p2, pa, n = coordinate_balance(small_run)
    assert n > 0 and p1 + p2 + pa == pytest.approx(1.0)


def test_reentry_estimate_drops_timeouts():
    a = np.array([[0, 0.1, 0, 0, 1], [0, 0.1, 0, 0, 0], [1, 1.0, 0, 0, 0]], dtype=float)
    b = np.array([[0, 0.1, 0, 0, 1], [0, 0.1, 0, 0, 1]], dtype=float)
    r = corner_reentry_estimate([a, b])
    assert r.p0 == 1.0 and r.argmax == 1
    assert r.per_start[0] == pytest.approx(0.5) and r.n_per_start[0] == 2
