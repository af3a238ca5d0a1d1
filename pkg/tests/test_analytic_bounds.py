import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cellflow.analytic_bounds import (BoundScale, FaFunction, crossing_sum_bound, erf_upper_cdf,
                                      expected_crossings_sum, fa, fa_convolve, laplace_gprime,
                                      log_lower_cdf, nth_crossing_density, numerical_laplace,
                                      quad_identity_check, selftest)

pos = st.floats(0.01, 2.0)


def _erfc_series(x, terms=80):
    # Maclaurin series of erf, independent of libm and scipy
    s = sum((-1) ** k * x ** (2 * k + 1) / (math.factorial(k) * (2 * k + 1)) for k in range(terms))
    return 1.0 - 2.0 / math.sqrt(math.pi) * s


def test_erf_upper_examples():
    assert erf_upper_cdf(1, 1.0, 1.0, 1.0) == pytest.approx(_erfc_series(1.0), abs=1e-15)
    assert erf_upper_cdf(1, 1.0, 1.0, 1.0) == pytest.approx(0.157299207050285, abs=1e-14)
    assert erf_upper_cdf(1, 0.1, 1.0, 1e12) == pytest.approx(1.0, abs=1e-6)
    assert erf_upper_cdf(2, 0.1, 1.0, 0.5) < erf_upper_cdf(1, 0.1, 1.0, 0.5)
    t = np.linspace(0.01, 1, 50)
    assert np.all(np.diff(erf_upper_cdf(1, 0.1, 1.0, t)) > 0)
    with pytest.raises(ValueError):
        erf_upper_cdf(1, 0.1, -1.0, 1.0)


def test_log_lower_examples():
    d = math.exp(-1)
    assert log_lower_cdf(1, d, 1.0, 4 * math.exp(-2)) == pytest.approx(0.5)
    c, n, delta = 0.7, 2, 0.05
    t0 = (c * n * delta * abs(math.log(delta))) ** 2
    assert log_lower_cdf(n, delta, c, t0) == pytest.approx(0.0, abs=1e-15)
    assert log_lower_cdf(n, delta, c, 0.5 * t0) == 0.0
    assert log_lower_cdf(1, 0.1, 1.0, 1e12) == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        log_lower_cdf(1, 1.5, 1.0, 1.0)


def test_fa_family():
    f = FaFunction(0.5)
    assert f(0.2) == 0.0 and f(0.25) == 0.0
    assert f(1.0) == pytest.approx(0.5)
    assert f.derivative(1.0) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        FaFunction(0.0)


def test_fa_convolve_examples_and_quadrature_oracle():
    assert fa_convolve(1.0, 1.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert fa_convolve(1.0, 1.0, 4.0) == pytest.approx(1 - math.sqrt(3) / 2, abs=1e-15)
    assert fa_convolve(1.0, 1.0, 1.5) == 0.0
    for a, b, t in ((1.0, 1.0, 4.0), (0.3, 0.8, 2.0), (0.05, 0.4, 0.3)):
        num = integrate.quad(lambda s: fa(b, t - s) * FaFunction(a).derivative(s), a * a, t,
                             epsabs=0.0, epsrel=1e-12, limit=200)[0]
        assert fa_convolve(a, b, t) == pytest.approx(num, abs=1e-10)


@given(pos, pos, st.floats(0.0, 20.0))
def test_fa_convolve_dominates_f_sum(a, b, t):
    assert fa_convolve(a, b, t) - fa(a + b, t) >= -1e-12


def test_density_normalisation_and_cdf():
    for n, delta, c0 in ((1, 0.05, 1.0), (3, 0.02, 0.5)):
        a2 = (n * delta / c0) ** 2
        f = lambda s: nth_crossing_density(n, delta, c0, s)  # noqa: E731
        assert numerical_laplace(f, 0.0, a2) == pytest.approx(1.0, abs=1e-8)
        for t in (0.5 * a2, 3 * a2):
            cuts = [1e-300] + [t * 2.0**-k for k in range(10, -1, -1)]
            num = sum(integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12)[0]
                      for lo, hi in zip(cuts[:-1], cuts[1:]))
            assert num == pytest.approx(float(erf_upper_cdf(n, delta, c0, t)), abs=1e-8)
    assert nth_crossing_density(1, 0.1, 1.0, 1e-6) == 0.0


def test_expected_crossings_sum():
    assert expected_crossings_sum(10.0, 1.0, 1.0) < 1e-14
    for c in (0.5, 1.0, 2.0):
        for x in (0.5, 0.1, 0.01):  # x = delta / (c sqrt t)
            delta, t = 0.01, (0.01 / (c * x)) ** 2
            val, n_terms = expected_crossings_sum(delta, c, t, return_terms=True)
            assert n_terms <= math.ceil(12 * c * math.sqrt(t) / delta)
            assert val <= crossing_sum_bound(delta, c, t)
            # the normalised sum sits near 1/sqrt(pi) - x/2
            assert 0.3 <= val * delta / (c * math.sqrt(t)) <= 1.2
            assert val * x == pytest.approx(1 / math.sqrt(math.pi) - x / 2, abs=x**2 + 1e-12)


def test_quad_identity_examples():
    t = 2.0
    assert quad_identity_check(t, 0.0, t / 2) <= 1e-8
    assert quad_identity_check(1.0, 0.25, 0.5) <= 1e-8
    assert quad_identity_check(1.0, 0.25, 1 - 1e-6) <= 1e-6
    with pytest.raises(ValueError):
        quad_identity_check(1.0, 0.5, 0.4)


def test_laplace_examples():
    delta, c0 = 0.1, 2.0
    assert laplace_gprime(0.0, delta, c0) == 1.0
    assert laplace_gprime(c0**2 / (4 * delta**2), delta, c0) == pytest.approx(math.exp(-1))
    for s in (0.5, 10.0, 300.0):
        g1 = lambda u: nth_crossing_density(1, delta, c0, u)  # noqa: E731
        g3 = lambda u: nth_crossing_density(3, delta, c0, u)  # noqa: E731
        assert numerical_laplace(g1, s, delta**2) == pytest.approx(
            laplace_gprime(s, delta, c0), abs=1e-7)
        assert numerical_laplace(g3, s, 9 * delta**2) == pytest.approx(
            laplace_gprime(s, delta, c0) ** 3, abs=1e-6)


def test_bound_scale_validation():
    BoundScale(1.0, 2.0)
    with pytest.raises(ValueError):
        BoundScale(1.0, 0.0)


def test_selftest_suite_passes():
    rows = selftest()
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]
