import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nsdecal import diffkit as dk
from nsdecal.sde import (NeuralSDEModel, SimulationError, TimeGrid, brownian_increments, correlate,
                         p_drifts, simulate_p, simulate_q)


def constant_net(net, value):
    """Make an Mlp output the constant ``value`` (pre-activation for softplus outputs)."""
    for w in net.weights:
        w.data[...] = 0.0
    for b in net.biases:
        b.data[...] = 0.0
    if net.output_activation == "softplus":
        value = math.log(math.expm1(value))
    net.biases[-1].data[...] = value


def small_model(factors=2, with_zeta=True, seed=0, **kw):
    return NeuralSDEModel.build(hidden=(8, 8), factors=factors, with_zeta=with_zeta, r=0.02,
                                rho=kw.pop("rho", -0.3), rng=np.random.default_rng(seed), **kw)


# ------------------------------------------------------------------ time grid


@given(n=st.integers(1, 40), pts=st.lists(st.floats(0.01, 1.0), max_size=6))
def test_grid_including_contains_points_and_is_increasing(n, pts):
    g = TimeGrid.including(1.0, n, pts)
    assert np.all(np.diff(g.times) > 0)
    assert g.times[0] == 0.0 and g.horizon == pytest.approx(1.0)
    for p in pts:
        assert abs(g.times[g.index_of(p, tol=1e-9)] - p) <= 1e-9


def test_grid_refine_and_uniformity():
    g = TimeGrid.uniform(1.0, 4)
    f = g.refine(3)
    assert f.n_steps == 12 and f.is_uniform()
    np.testing.assert_allclose(f.times[::3], g.times)
    assert not TimeGrid.including(1.0, 4, [0.1]).is_uniform()
    with pytest.raises(ValueError):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))


# ---------------------------------------------------------------- increments


def test_increment_variance_and_correlation():
    g = TimeGrid.uniform(1.0, 4)
    dw1, du = brownian_increments(g, 200_000, np.random.default_rng(0))
    assert dw1.var(axis=0) == pytest.approx(np.full(4, 0.25), rel=0.02)
    dw2 = correlate(dw1, du, -0.6)
    assert np.corrcoef(dw1[:, 0], dw2[:, 0])[0, 1] == pytest.approx(-0.6, abs=0.01)
    np.testing.assert_array_equal(correlate(dw1, du, 1.0), dw1)
    np.testing.assert_array_equal(correlate(dw1, du, -1.0), -dw1)


# ---------------------------------------------------------------- simulation


def test_constant_volatility_reduces_to_exact_gbm():
    m = small_model(factors=1, with_zeta=False)
    constant_net(m.sigma_nets[0], 0.3)
    g = TimeGrid.uniform(1.0, 10)
    inc = brownian_increments(g, 50, np.random.default_rng(1))
    paths = simulate_q(m, g, increments=inc)
    ref = np.log(m.S0) + np.concatenate(
        [np.zeros((50, 1)), np.cumsum((0.02 - 0.045) * g.dt + 0.3 * inc[0], axis=1)], axis=1)
    np.testing.assert_allclose(paths.Y, ref, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("factors", [1, 2])
def test_discounted_price_is_a_martingale(factors):
    m = small_model(factors=factors, seed=3)
    g = TimeGrid.uniform(1.0, 12)
    paths = simulate_q(m, g, M=40_000, rng=np.random.default_rng(2))
    disc = np.exp(-m.r * g.times) * paths.S
    mean = disc.mean(axis=0)
    se = disc.std(axis=0, ddof=1) / math.sqrt(disc.shape[0])
    assert np.all(np.abs(mean - m.S0) <= 4 * se + 1e-12)


def test_zero_market_price_of_risk_gives_bitwise_equal_measures():
    m = small_model(factors=2, seed=5)
    constant_net(m.zeta_net, 0.0)
    g = TimeGrid.uniform(1.0, 6)
    inc = brownian_increments(g, 30, np.random.default_rng(4))
    q = simulate_q(m, g, increments=inc)
    p = simulate_p(m, g, increments=inc)
    np.testing.assert_array_equal(q.Y, p.Y)
    np.testing.assert_array_equal(q.V, p.V)


@given(z1=st.floats(-2, 2), z2=st.floats(-2, 2), rho=st.floats(-0.99, 0.99))
def test_p_drift_formula(z1, z2, rho):
    m = small_model(factors=2, seed=7, rho=rho)
    zn = m.zeta_net
    for w in zn.weights:
        w.data[...] = 0.0
    zn.biases[-1].data[...] = [z1, z2]
    t, y, v = 0.3, np.array([0.1, -0.2]), np.array([0.04, 0.09])
    sig = m.sigma(t, np.exp(y), v).data
    sv = m.sigma_v(t, v).data
    bv = m.drift_v(t, v).data
    b_y, b_v = p_drifts(m, t, y, v)
    np.testing.assert_allclose(b_y.data, m.r - 0.5 * sig**2 + sig**2 * z1 + rho * sig * sv * z2, rtol=1e-12)
    np.testing.assert_allclose(b_v.data, bv + rho * sig * sv * z1 + sv**2 * z2, rtol=1e-12, atol=1e-15)


def test_one_factor_holds_variance_constant():
    m = small_model(factors=1, seed=2, V0=0.07)
    paths = simulate_q(m, TimeGrid.uniform(1.0, 5), M=10, rng=np.random.default_rng(0))
    assert (paths.V == 0.07).all()


def test_simulation_is_differentiable_through_paths():
    m = small_model(factors=2, seed=11)
    g = TimeGrid.uniform(1.0, 3)
    inc = brownian_increments(g, 20, np.random.default_rng(0))
    w = m.sigma_nets[0].weights[0]
    x0 = w.data.copy()
    # gradient of mean terminal price with respect to one sigma weight, via the tape
    w.requires_grad = True
    out = dk.mean(simulate_q(m, g, increments=inc).S_node(3))
    (grad,) = dk.gradients(out, [w])
    h = 1e-6
    i = (0, 0)
    vals = []
    for s in (h, -h):
        w.data = x0.copy()
        w.data[i] += s
        with dk.no_grad():
            vals.append(simulate_q(m, g, increments=inc).S[:, 3].mean())
    w.data = x0
    assert grad[i] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-5, abs=1e-10)


def test_non_finite_increment_raises_with_step_and_paths():
    m = small_model(factors=1, seed=1)
    g = TimeGrid.uniform(1.0, 4)
    dw1, du = brownian_increments(g, 5, np.random.default_rng(0))
    dw1[2, 1] = np.nan
    with pytest.raises(SimulationError) as info:
        simulate_q(m, g, increments=(dw1, du))
    assert info.value.step == 2 and list(info.value.paths) == [2]


def test_model_serialisation_round_trip():
    m = small_model(factors=2, seed=9, n_segments=2, segment_ends=[0.5, 1.0])
    back = NeuralSDEModel.from_dict(m.to_dict())
    g = TimeGrid.uniform(1.0, 4)
    inc = brownian_increments(g, 7, np.random.default_rng(0))
    np.testing.assert_array_equal(simulate_p(m, g, increments=inc).Y, simulate_p(back, g, increments=inc).Y)


def test_segments_select_networks_by_time():
    m = small_model(factors=1, seed=4, n_segments=2, segment_ends=[0.5, 1.0])
    assert m.segment_of(0.0) == 0 and m.segment_of(0.49) == 0
    assert m.segment_of(0.5) == 1 and m.segment_of(1.0) == 1
    constant_net(m.sigma_nets[0], 0.1)
    constant_net(m.sigma_nets[1], 0.4)
    s = np.ones(3)
    assert m.sigma(0.2, s, None).data == pytest.approx(0.1)
    assert m.sigma(0.7, s, None).data == pytest.approx(0.4)


@given(c=st.floats(0.1, 10.0), v=st.floats(0.001, 1.0))
def test_variance_input_is_scaled_by_v0(c, v):
    # coefficients depend on V only through V / V0
    a = small_model(seed=5)
    b = NeuralSDEModel.from_dict({**a.to_dict(), "V0": a.V0 * c})
    S, V = np.array([1.1]), np.array([v])
    with dk.no_grad():
        pairs = [(a.sigma(0.3, S, V), b.sigma(0.3, S, V * c)),
                 (a.sigma_v(0.3, V), b.sigma_v(0.3, V * c)),
                 (a.drift_v(0.3, V), b.drift_v(0.3, V * c)),
                 *zip(a.zeta(0.3, np.log(S), V), b.zeta(0.3, np.log(S), V * c))]
    for x, y in pairs:
        np.testing.assert_allclose(x.data, y.data, rtol=1e-12)
