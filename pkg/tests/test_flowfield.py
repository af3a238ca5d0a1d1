import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellflow.flowfield import (FlowParams, RegionTag, cell_index, classify_region,
                                corner_angle_distance, corner_coords, corner_gamma0,
                                divergence_v, edge_mesh, grad_h, hamiltonian, in_corner, in_edge,
                                in_fattened_corner, laplacian_h, layer16_mesh, theta_proxy,
                                velocity)

coords = st.floats(-20.0, 20.0, allow_nan=False)


def _fd_grad(f, p, eps=1e-6):
    p = np.asarray(p, dtype=float)
    e1, e2 = np.array([eps, 0.0]), np.array([0.0, eps])
    return np.array([(f(p + e1) - f(p - e1)) / (2 * eps), (f(p + e2) - f(p - e2)) / (2 * eps)])


@given(coords, coords)
def test_velocity_is_perpendicular_gradient(x1, x2):
    p = np.array([x1, x2])
    g = _fd_grad(hamiltonian, p)
    v = velocity(p)
    assert np.allclose(v, [-g[1], g[0]], atol=1e-8)
    assert np.allclose(grad_h(p), g, atol=1e-8)


@given(coords, coords)
def test_divergence_free_and_laplacian(x1, x2):
    p = np.array([x1, x2])
    div = _fd_grad(lambda q: velocity(q)[0], p)[0] + _fd_grad(lambda q: velocity(q)[1], p)[1]
    assert abs(div) < 1e-7
    assert abs(divergence_v(p)) < 1e-12
    assert math.isclose(laplacian_h(p), -2.0 * hamiltonian(p), abs_tol=1e-12)


def test_flow_params_validation():
    p = FlowParams(1600.0)
    assert p.delta == pytest.approx(0.025)
    assert p.log_delta == pytest.approx(abs(math.log(0.025)))
    assert FlowParams(0.0).delta == math.inf
    for bad in (dict(A=-1.0), dict(A=100.0, N=0.0), dict(A=100.0, beta0=0.3, beta0_prime=0.2),
                dict(A=1.0, N=2.0)):
        with pytest.raises(ValueError):
            FlowParams(**bad)


@settings(max_examples=200)
@given(coords, coords)
def test_angular_proxy_distance_range_and_periodicity(x1, x2):
    p = np.array([x1, x2])
    d = corner_angle_distance(p)
    assert 0.0 <= d <= math.pi / 4 + 1e-12
    q = p + 2 * math.pi * np.array([3, -2])
    assert math.isclose(corner_angle_distance(q), d, abs_tol=1e-9)


def test_angular_proxy_values():
    # points straight below and straight left of the centre of (0, pi)^2 sit mid-edge
    mid_south = np.array([math.pi / 2, 0.01])
    corner_diag = np.array([0.01, 0.01])
    assert corner_angle_distance(mid_south) == pytest.approx(math.pi / 4)
    assert corner_angle_distance(corner_diag) == pytest.approx(0.0, abs=1e-12)
    assert tuple(cell_index(np.array([-0.1, 3.3]))) == (-1, 1)
    assert np.isfinite(theta_proxy(mid_south))


def test_region_classification_nested():
    params = FlowParams(1000.0)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-4, 4, size=(20000, 2))
    tags = classify_region(pts, params)
    c, fc, e = in_corner(pts, params), in_fattened_corner(pts, params), in_edge(pts, params)
    assert np.all(fc[c])
    assert np.all((tags == RegionTag.CORNER_LAYER) == c)
    assert np.all((tags == RegionTag.INTERIOR) == (np.abs(hamiltonian(pts)) >= params.delta))
    assert np.all(e | c | (tags == RegionTag.INTERIOR))
    assert classify_region(np.array([1.5, 1.5]), params) is RegionTag.INTERIOR


def test_corner_coords():
    h, th = corner_coords(np.array([math.pi + 0.1, 0.2]))
    assert h == pytest.approx(math.sin(0.1) * math.sin(0.2))
    assert th == pytest.approx(math.cos(0.1) / math.cos(0.2))
    with pytest.raises(ValueError):
        corner_coords(np.array([math.pi / 2, math.pi / 2]))


def test_corner_gamma0_matches_region_geometry():
    params = FlowParams(1000.0)
    g0 = corner_gamma0(params)
    # independent oracle: brute-force sup of x1 over a fine sample of the fattened corner
    s = np.linspace(1e-6, 1.2, 1500)
    X1, X2 = np.meshgrid(s, s, indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], -1)
    sel = in_fattened_corner(pts, params)
    assert pts[sel, 0].max() == pytest.approx(g0, abs=2e-3)


def test_meshes_lie_in_their_regions():
    for A in (400.0, 1600.0, 6400.0):
        params = FlowParams(A)
        m = layer16_mesh(params)
        h = hamiltonian(m)
        assert m.shape == (16, 2)
        assert np.all((h > 0) & (h < params.delta))
        assert np.allclose(np.sort(np.unique(np.round(h / params.delta, 9))), [0.25, 0.75])
        e = edge_mesh(params)
        assert np.all(corner_angle_distance(e) > params.beta0_prime)
        assert np.all(np.abs(hamiltonian(e)) < params.delta)
        assert np.all(e[:, 1] < 0.1)
