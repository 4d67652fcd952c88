import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from nsdecal import diffkit as dk
from nsdecal import refmodels as rm
from nsdecal.bayes import (CalibrationError, Calibrator, HyperParams, OptionDataset, TimeSeriesDataset,
                           algorithm2_run, g_of_theta, log_lik_options, log_lik_timeseries, log_prior,
                           option_segments, spread_weights)
from nsdecal.sde import NeuralSDEModel, TimeGrid, brownian_increments

spreads = arrays(np.float64, st.integers(1, 40), elements=st.floats(1e-3, 1e3))


@given(d=spreads)
def test_spread_weights_sum_to_one(d):
    _, delta2, w = spread_weights(d)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert delta2 == pytest.approx(1.0 / np.sum(1.0 / d**2), rel=1e-12)
    assert delta2 <= d.min() ** 2 * (1 + 1e-12)


def test_zero_spread_names_the_option():
    with pytest.raises(ValueError, match="option 2"):
        spread_weights([1.0, 2.0, 0.0])


def test_quotes_give_basis_point_spreads():
    ds = OptionDataset.from_quotes([1.0, 1.1], [0.5, 0.5], [0.10, 0.05], [0.12, 0.0502], S0=2.0)
    np.testing.assert_allclose(ds.delta_i, [1e4 / 2.0 * 0.02, 1e4 / 2.0 * 0.0002])
    np.testing.assert_allclose(ds.prices, [0.11, 0.0501])


@given(err=arrays(np.float64, 6, elements=st.floats(-0.01, 0.01)), delta=st.floats(0.5, 10.0))
def test_option_likelihood_equals_gaussian_logpdf(err, delta):
    # [DERIVED] with equal spreads the likelihood is a product of N(0, delta^2) densities of
    # the scaled errors 1e4/S0 * err / sqrt(J)
    S0 = 1.7
    ds = OptionDataset(np.ones(6), np.ones(6), np.full(6, 0.3), S0)
    ll = log_lik_options(ds.prices + err, ds, delta).item()
    x = 1e4 / S0 * err / math.sqrt(6)
    assert ll == pytest.approx(stats.norm.logpdf(x, scale=delta).sum(), rel=1e-11, abs=1e-9)
    assert g_of_theta(ds.prices + err, ds).item() == pytest.approx(1e8 / S0**2 * np.mean(err**2), rel=1e-12)


def _ts_model(factors, seed=0, rho=-0.4):
    return NeuralSDEModel.build(hidden=(6,), factors=factors, with_zeta=True, r=0.02, rho=rho,
                                rng=np.random.default_rng(seed))


def test_two_factor_timeseries_likelihood_is_bivariate_gaussian():
    # [DERIVED] scipy's bivariate normal density of each Euler transition
    m = _ts_model(2)
    p = rm.HESTON_PAPER
    hp = rm.heston_simulate(p, TimeGrid.uniform(1.0, 12), 1, np.random.default_rng(1), "P")
    ts = TimeSeriesDataset(hp.grid.times, hp.Y[0], np.abs(hp.V[0]))
    got = log_lik_timeseries(m, ts).item()
    ref = 0.0
    from nsdecal.sde import p_drifts
    for n in range(ts.n_steps):
        t, y, v, dt = ts.times[n], ts.Y[n:n + 1], ts.V[n:n + 1], ts.dt[n]
        sig = m.sigma(t, np.exp(y), v).item()
        sv = m.sigma_v(t, v).item()
        by, bv = (x.item() for x in p_drifts(m, t, y, v))
        cov = dt * np.array([[sig**2, m.rho * sig * sv], [m.rho * sig * sv, sv**2]])
        ref += stats.multivariate_normal.logpdf([ts.Y[n + 1] - y[0], ts.V[n + 1] - v[0]],
                                                mean=[by * dt, bv * dt], cov=cov)
    assert got == pytest.approx(ref, rel=1e-10)


def test_one_factor_timeseries_likelihood_is_gaussian():
    m = _ts_model(1, seed=3)
    g = TimeGrid.uniform(1.0, 10)
    y = rm.bs_simulate(rm.BS_PAPER, g, 1, np.random.default_rng(2))[0]
    ts = TimeSeriesDataset(g.times, y)
    from nsdecal.sde import p_drifts
    ref = 0.0
    for n in range(10):
        t, yy, dt = g.times[n], y[n:n + 1], g.dt[n]
        sig = m.sigma(t, np.exp(yy), m.V0).item()
        by, _ = p_drifts(m, t, yy, m.V0)
        ref += stats.norm.logpdf(y[n + 1] - yy[0], loc=by.item() * dt, scale=sig * math.sqrt(dt))
    assert log_lik_timeseries(m, ts).item() == pytest.approx(ref, rel=1e-10)


def test_timeseries_requires_variances_for_two_factor():
    m = _ts_model(2)
    with pytest.raises(ValueError):
        log_lik_timeseries(m, TimeSeriesDataset(np.array([0.0, 0.5]), np.array([0.0, 0.1])))


@given(x=arrays(np.float64, 5, elements=st.floats(-3, 3)), s=st.floats(0.1, 5))
def test_log_prior_is_gaussian_kernel(x, s):
    p = [dk.Tensor(x[:2]), dk.Tensor(x[2:])]
    assert log_prior(p, s).item() == pytest.approx(-np.sum(x**2) / (2 * s * s), rel=1e-12, abs=1e-300)
    assert log_prior(p, [s, 2 * s]).item() == pytest.approx(
        -np.sum(x[:2]**2) / (2 * s * s) - np.sum(x[2:]**2) / (8 * s * s), rel=1e-12, abs=1e-300)


# ---------------------------------------------------------------- calibration


def _bs_setup(epochs=3, with_ts=True, seed=0, n_segments=1, **hyper):
    grid = TimeGrid.uniform(1.0, 8)
    mats = np.repeat([0.5, 1.0], 3)
    ks = np.tile([0.9, 1.0, 1.1], 2)
    ds = OptionDataset(ks, mats, rm.bs_call(1.0, ks, mats, 0.3, 0.025), 1.0)
    ts = None
    if with_ts:
        y = rm.bs_simulate(rm.BS_PAPER, grid, 1, np.random.default_rng(5))[0]
        ts = TimeSeriesDataset(grid.times, y)
    model = NeuralSDEModel.build(hidden=(8, 8), factors=1, with_zeta=with_ts, r=0.025,
                                 n_segments=n_segments,
                                 segment_ends=[0.5, 1.0] if n_segments == 2 else None,
                                 rng=np.random.default_rng(seed))
    hp = HyperParams(step_size=1e-7, epochs=epochs, M=100, delta=1.0, seed=seed, hedge_hidden=(8,),
                     **hyper)
    return Calibrator(model, grid, ds, ts, hp, lookback_maturities=[1.0])


def test_calibration_is_deterministic_per_seed():
    a = _bs_setup().run()
    b = _bs_setup().run()
    assert a == b and len(a) == 3
    c = _bs_setup(seed=1).run()
    assert not np.array_equal(a.series("G"), c.series("G"))


def test_chain_columns_and_record_contents():
    cal = _bs_setup(epochs=2)
    chain = cal.run()
    assert chain.names[:2] == ["log_post", "G"]
    assert {"price_6", "lookback_1", "cv_loss", "step_size"} <= set(chain.names)
    assert np.isfinite(chain.matrix()).all()
    assert (chain.series("step_size") == 1e-7).all()


def test_zero_epochs_leaves_empty_chain():
    assert len(_bs_setup(epochs=0).run()) == 0


def test_log_posterior_gradient_matches_finite_differences():
    cal = _bs_setup(epochs=0)
    inc = brownian_increments(cal.grid, 100, np.random.default_rng(3), 8)
    p = cal.model.sigma_nets[0].biases[0]
    cal.model.requires_grad_(False)
    p.requires_grad = True
    (g,) = dk.gradients(cal.log_posterior(inc), [p])
    x0 = p.data.copy()
    h = 1e-6
    fd = np.empty_like(x0)
    with dk.no_grad():
        for i in range(x0.size):
            vals = []
            for s in (h, -h):
                p.data = x0.copy()
                p.data[i] += s
                vals.append(cal.log_posterior(inc).item())
            fd[i] = (vals[0] - vals[1]) / (2 * h)
    p.data = x0
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_non_finite_paths_raise_calibration_error():
    cal = _bs_setup(epochs=2)
    net = cal.model.sigma_nets[0]
    net.biases[-1].data[...] = np.nan
    with pytest.raises(CalibrationError, match="non-finite state") as info:
        cal.run()
    assert info.value.epoch == 0 and info.value.stage == 0
    assert len(cal.chain) == 0


def test_staged_run_freezes_earlier_segments():
    cal = _bs_setup(epochs=2, with_ts=False, n_segments=2)
    model = cal.model
    seen = {}

    def snap(rec):
        seen[(rec.stage, rec.epoch)] = model.sigma_nets[0].get_flat().copy()

    chain, hedges = algorithm2_run(cal, callback=snap)
    assert len(hedges) == 2 and hedges[0] is not hedges[1]
    np.testing.assert_array_equal(seen[(1, 0)], seen[(1, 1)])
    np.testing.assert_array_equal(seen[(0, 1)], seen[(1, 1)])
    assert not np.array_equal(seen[(0, 0)], seen[(0, 1)])
    # stage 0 records only options maturing at 0.5, the others are NaN
    first = chain.matrix([f"price_{i}" for i in range(1, 7)])[0]
    assert np.isfinite(first[:3]).all() and np.isnan(first[3:]).all()
    np.testing.assert_array_equal(option_segments(model, [0.25, 0.5, 0.75, 1.0]), [0, 0, 1, 1])


def test_staged_run_rejects_timeseries():
    with pytest.raises(ValueError):
        algorithm2_run(_bs_setup(epochs=1, with_ts=True))


def test_hyperparameter_validation():
    with pytest.raises(ValueError):
        HyperParams(M=1)
    with pytest.raises(ValueError):
        HyperParams(delta=0.0)


def test_repeated_skipped_steps_abort_the_run(monkeypatch):
    from nsdecal import bayes
    monkeypatch.setattr(bayes, "sgld_step", lambda *a, **k: False)
    cal = _bs_setup(epochs=bayes.MAX_SKIPPED_STEPS + 5, with_ts=False)
    with pytest.raises(CalibrationError, match="consecutive non-finite") as info:
        cal.run()
    assert info.value.epoch == bayes.MAX_SKIPPED_STEPS - 1
    assert len(cal.chain) == bayes.MAX_SKIPPED_STEPS - 1
