import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsdecal import kernels as kn
from nsdecal._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not importable")


@needs_numba
@given(seed=st.integers(0, 2**32 - 1), stride=st.sampled_from([1, 2, 5]))
def test_heston_euler_backends_agree(seed, stride):
    rng = np.random.default_rng(seed)
    dw1 = rng.normal(0, 0.1, (6, 10))
    dw2 = 0.3 * dw1 + rng.normal(0, 0.1, (6, 10))
    dt = np.full(10, 0.01)
    a = kn.heston_euler_np(0.0, 0.04, 0.02, 1.5, 0.05, 0.6, dt, dw1, dw2, stride)
    b = kn.heston_euler_nb(0.0, 0.04, 0.02, 1.5, 0.05, 0.6, dt, dw1, dw2, stride)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)


def test_heston_full_truncation_never_uses_negative_variance():
    # a large negative shock drives V below zero; the next step must use V+ = 0
    dw1 = np.zeros((1, 2))
    dw2 = np.array([[-1.0, 0.0]])
    y, v = kn.heston_euler_np(0.0, 0.04, 0.0, 1.0, 0.04, 1.0, np.full(2, 0.01), dw1, dw2, 1)
    assert v[0, 1] < 0
    assert y[0, 2] == y[0, 1]                   # no diffusion or variance drift from V < 0
    assert v[0, 2] == pytest.approx(v[0, 1] + 1.0 * 0.04 * 0.01)


@needs_numba
@given(x=arrays(np.float64, (7, 4), elements=st.floats(-10, 10)))
def test_running_max_and_lookback_backends_agree(x):
    s = np.exp(x / 5)
    np.testing.assert_array_equal(kn.running_max_np(s), kn.running_max_nb(s))
    for idx in (0, 2, 3):
        np.testing.assert_allclose(kn.lookback_put_np(s, idx), kn.lookback_put_nb(s, idx), rtol=1e-15)


@given(x=arrays(np.float64, (5, 6), elements=st.floats(0.1, 10)))
def test_lookback_payoff_is_nonnegative_and_matches_definition(x):
    v = kn.lookback_put(x, 5)
    np.testing.assert_allclose(v, x.max(axis=1) - x[:, 5])
    assert (v >= 0).all()


@given(x=arrays(np.float64, (9, 3), elements=st.one_of(st.floats(-5, 5), st.just(np.nan))),
       qs=st.lists(st.floats(0, 1), min_size=1, max_size=4))
def test_column_quantiles_match_numpy_linear_method(x, qs):
    got = kn.column_quantiles(x, qs)
    for c in range(x.shape[1]):
        col = x[:, c][~np.isnan(x[:, c])]
        if col.size == 0:
            assert np.isnan(got[:, c]).all()
        else:
            np.testing.assert_allclose(got[:, c], np.quantile(col, qs, method="linear"), rtol=1e-12, atol=1e-12)
    if HAVE_NUMBA:
        np.testing.assert_allclose(kn.column_quantiles_nb(x, np.asarray(qs, dtype=np.float64)),
                                   kn.column_quantiles_np(x, qs), rtol=1e-15, equal_nan=True)


@given(seed=st.integers(0, 1000))
def test_log_euler_matches_cumulative_sum(seed):
    rng = np.random.default_rng(seed)
    var = rng.uniform(0.01, 0.2, (3, 8))
    dw = rng.normal(0, 0.1, (3, 8))
    dt = np.full(8, 0.125)
    y = kn.log_euler(0.1, var, dw, dt, 0.03)
    ref = 0.1 + np.concatenate([np.zeros((3, 1)), np.cumsum((0.03 - 0.5 * var) * dt + np.sqrt(var) * dw, axis=1)], axis=1)
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-14)
