import math

import numpy as np
import pytest

from cellflow.ensemble_stats import variance_curve
from cellflow.flowfield import FlowParams, hamiltonian, velocity
from cellflow.montecarlo import run_ensemble
from cellflow.sde_engine import (NoiseStream, ParticleState, StepPolicy, convect_exact, em_step,
                                 orbit_period, path_generator, simulate_grid, simulate_path)


def test_step_policy_values():
    pol = StepPolicy()
    assert pol.dt(FlowParams(0.0)) == 1e-4
    assert pol.dt(FlowParams(1000.0)) == pytest.approx(1e-5)
    assert pol.dt(FlowParams(6400.0)) == pytest.approx(min(0.01 / 6400, 0.05 / 6400))
    assert StepPolicy(dt_drift_frac=1.0).dt(FlowParams(6400.0)) == pytest.approx(0.05 / 6400)
    with pytest.raises(ValueError):
        StepPolicy(dt_max=0.0)


def test_noise_stream_is_the_keyed_generator():
    ns = NoiseStream(7, 3)
    ref = np.random.Generator(np.random.PCG64(np.random.SeedSequence([7, 3])))
    got = np.array([ns.pair() for _ in range(5)])
    assert np.array_equal(got, ref.standard_normal(10).reshape(5, 2))
    assert ns.draws == 5
    other = path_generator(7, 4).standard_normal(2)
    assert not np.array_equal(other, got[0])


def test_em_step_formula():
    params = FlowParams(100.0)
    s = ParticleState([0.3, 1.1], 0.5)
    z = np.array([0.7, -1.2])
    dt = 1e-4
    new = em_step(s, dt, z, params)
    expect = s.pos - params.A * velocity(s.pos) * dt + math.sqrt(2 * dt) * z
    assert np.allclose(new.pos, expect, rtol=0, atol=1e-15)
    assert new.t == pytest.approx(0.5 + dt)


def test_python_loop_matches_compiled_kernel():
    params = FlowParams(1000.0)
    pol = StepPolicy()
    t_end = 0.00735
    a = simulate_path((0.2, 0.4), t_end, pol, NoiseStream(11, 2), params)
    b = simulate_grid((0.2, 0.4), [t_end], pol, 11, 2, params)[-1]
    assert np.array_equal(a.pos, b)


def test_grid_is_deterministic_and_free_of_accumulated_time():
    params = FlowParams(400.0)
    g = np.array([0.001, 0.0025, 0.01])
    a = simulate_grid((0, 0), g, StepPolicy(), 5, 9, params)
    b = simulate_grid((0, 0), g, StepPolicy(), 5, 9, params)
    assert np.array_equal(a, b)


def test_observers_see_every_step():
    params = FlowParams(100.0)
    calls = []
    simulate_path((0.1, 0.1), 1e-3, StepPolicy(), NoiseStream(1, 0), params,
                  observers=[lambda p, n: calls.append((p.t, n.t))])
    dt = StepPolicy().dt(params)
    assert len(calls) == math.ceil(1e-3 / dt - 1e-9)
    assert calls[-1][1] == 1e-3
    assert all(b > a for a, b in calls)


def test_convection_conserves_h_and_returns_after_one_period():
    A = 50.0
    params = FlowParams(A)
    x0 = np.array([0.6, 0.6])
    h0 = float(hamiltonian(x0))
    T = orbit_period(h0, A)
    end = convect_exact(ParticleState(x0), T, params)
    assert hamiltonian(end.pos) == pytest.approx(h0, abs=1e-9)
    assert np.allclose(end.pos, x0, atol=1e-6)
    half = convect_exact(ParticleState(x0), T / 2, params)
    assert not np.allclose(half.pos, x0, atol=1e-2)


def test_pure_diffusion_second_moment():
    # small oracle check; the full calibration lives in the acceptance suite
    params = FlowParams(0.0)
    ends = np.array([simulate_grid((0, 0), [0.1], StepPolicy(), 3, k, params)[-1]
                     for k in range(4000)])
    m2 = (ends**2).sum(axis=1)
    assert abs(m2.mean() - 0.4) < 4 * m2.std() / math.sqrt(m2.size)


@pytest.mark.slow
def test_weak_order_step_halving():
    # halving dt at A = 1000 moves E|X_t - x|^2 at t = 0.01 by less than 3 SE (10^5 paths each)
    params = FlowParams(1000.0)
    est = []
    for pol in (StepPolicy(), StepPolicy(dt_drift_frac=0.005)):
        run = run_ensemble((0.0, 0.0), [0.01], params, pol, 31, 100_000, log_events=False)
        s = variance_curve(run)
        est.append((s.msd[0], s.msd_se[0]))
    (m1, s1), (m2, s2) = est
    assert abs(m1 - m2) <= 3 * np.hypot(s1, s2)
