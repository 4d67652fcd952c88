"""Hot path-wise loops: reference-model Euler schemes, running maxima, quantiles.

Each kernel exists twice: a numba ``@njit`` version (``*_nb``) and a pure
numpy version (``*_np``). The public name is bound to one of them according to
:data:`nsdecal._accel.USE_NUMBA`. Both versions are kept importable so tests
and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "heston_euler", "log_euler", "running_max", "lookback_put", "column_quantiles",
    "BACKEND",
]


# ------------------------------------------------------------- Heston full truncation


def heston_euler_np(y0, v0, mu, kappa, theta, volvol, dt, dw1, dw2, stride):
    """Full-truncation Euler for (log S, V); states recorded every ``stride`` steps.

    ``dw1``/``dw2`` are (M, N) correlated Brownian increments, ``dt`` is (N,).
    """
    m, n = dw1.shape
    n_out = n // stride + 1
    y_out = np.empty((m, n_out))
    v_out = np.empty((m, n_out))
    y = np.full(m, float(y0))
    v = np.full(m, float(v0))
    y_out[:, 0] = y
    v_out[:, 0] = v
    for k in range(n):
        vp = np.maximum(v, 0.0)
        sv = np.sqrt(vp)
        y = y + (mu - 0.5 * vp) * dt[k] + sv * dw1[:, k]
        v = v + kappa * (theta - vp) * dt[k] + volvol * sv * dw2[:, k]
        if (k + 1) % stride == 0:
            j = (k + 1) // stride
            y_out[:, j] = y
            v_out[:, j] = v
    return y_out, v_out


@njit(cache=True)
def heston_euler_nb(y0, v0, mu, kappa, theta, volvol, dt, dw1, dw2, stride):
    m, n = dw1.shape
    n_out = n // stride + 1
    y_out = np.empty((m, n_out))
    v_out = np.empty((m, n_out))
    for i in range(m):
        y = y0
        v = v0
        y_out[i, 0] = y
        v_out[i, 0] = v
        for k in range(n):
            vp = v if v > 0.0 else 0.0
            sv = np.sqrt(vp)
            y = y + (mu - 0.5 * vp) * dt[k] + sv * dw1[i, k]
            v = v + kappa * (theta - vp) * dt[k] + volvol * sv * dw2[i, k]
            if (k + 1) % stride == 0:
                j = (k + 1) // stride
                y_out[i, j] = y
                v_out[i, j] = v
    return y_out, v_out


# ------------------------------------------------------------------ log-Euler


def log_euler_np(y0, var, dw, dt, rate):
    """Y_{n+1} = Y_n + (rate - var_n/2) dt_n + sqrt(var_n) dW_n, var (M, N) at left points."""
    m, n = dw.shape
    out = np.empty((m, n + 1))
    out[:, 0] = y0
    inc = (rate - 0.5 * var) * dt[None, :] + np.sqrt(var) * dw
    np.cumsum(inc, axis=1, out=out[:, 1:])
    out[:, 1:] += y0
    return out


@njit(cache=True)
def log_euler_nb(y0, var, dw, dt, rate):
    m, n = dw.shape
    out = np.empty((m, n + 1))
    for i in range(m):
        y = y0
        out[i, 0] = y
        acc = 0.0
        for k in range(n):
            acc += (rate - 0.5 * var[i, k]) * dt[k] + np.sqrt(var[i, k]) * dw[i, k]
            out[i, k + 1] = y0 + acc
    return out


# ------------------------------------------------------------- running max / lookback


def running_max_np(s):
    return np.maximum.accumulate(s, axis=1)


@njit(cache=True)
def running_max_nb(s):
    m, n = s.shape
    out = np.empty_like(s)
    for i in range(m):
        cur = s[i, 0]
        for k in range(n):
            if s[i, k] > cur:
                cur = s[i, k]
            out[i, k] = cur
    return out


def lookback_put_np(s, idx):
    """Floating-strike lookback put payoff max_{n<=idx} S_n - S_idx, per path."""
    return s[:, : idx + 1].max(axis=1) - s[:, idx]


@njit(cache=True)
def lookback_put_nb(s, idx):
    m = s.shape[0]
    out = np.empty(m)
    for i in range(m):
        cur = s[i, 0]
        for k in range(1, idx + 1):
            if s[i, k] > cur:
                cur = s[i, k]
        out[i] = cur - s[i, idx]
    return out


# ------------------------------------------------------------------ quantiles


def column_quantiles_np(x, qs):
    """Per-column order-statistic quantiles, linear interpolation at h = (n-1) q.

    NaNs are dropped per column; a column with no finite draws yields NaN.
    """
    n_rows, n_cols = x.shape
    out = np.full((len(qs), n_cols), np.nan)
    srt = np.sort(x, axis=0)  # NaNs sort to the end
    counts = np.sum(~np.isnan(x), axis=0)
    for c in range(n_cols):
        n = counts[c]
        if n == 0:
            continue
        col = srt[:n, c]
        for j, q in enumerate(qs):
            h = (n - 1) * q
            lo = int(np.floor(h))
            hi = min(lo + 1, n - 1)
            out[j, c] = col[lo] + (h - lo) * (col[hi] - col[lo])
    return out


@njit(cache=True)
def column_quantiles_nb(x, qs):
    n_rows, n_cols = x.shape
    out = np.full((len(qs), n_cols), np.nan)
    buf = np.empty(n_rows)
    for c in range(n_cols):
        n = 0
        for r in range(n_rows):
            if not np.isnan(x[r, c]):
                buf[n] = x[r, c]
                n += 1
        if n == 0:
            continue
        col = np.sort(buf[:n])
        for j in range(len(qs)):
            h = (n - 1) * qs[j]
            lo = int(np.floor(h))
            hi = lo + 1 if lo + 1 < n else n - 1
            out[j, c] = col[lo] + (h - lo) * (col[hi] - col[lo])
    return out


BACKEND = "numba" if USE_NUMBA else "numpy"


def _pick(nb, np_):
    return nb if USE_NUMBA else np_


def heston_euler(y0, v0, mu, kappa, theta, volvol, dt, dw1, dw2, stride=1):
    fn = _pick(heston_euler_nb, heston_euler_np)
    return fn(float(y0), float(v0), float(mu), float(kappa), float(theta), float(volvol),
              np.ascontiguousarray(dt, dtype=np.float64), np.ascontiguousarray(dw1, dtype=np.float64),
              np.ascontiguousarray(dw2, dtype=np.float64), int(stride))


def log_euler(y0, var, dw, dt, rate=0.0):
    fn = _pick(log_euler_nb, log_euler_np)
    return fn(float(y0), np.ascontiguousarray(var, dtype=np.float64),
              np.ascontiguousarray(dw, dtype=np.float64), np.ascontiguousarray(dt, dtype=np.float64),
              float(rate))


def running_max(s):
    return _pick(running_max_nb, running_max_np)(np.ascontiguousarray(s, dtype=np.float64))


def lookback_put(s, idx):
    return _pick(lookback_put_nb, lookback_put_np)(np.ascontiguousarray(s, dtype=np.float64), int(idx))


def column_quantiles(x, qs):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return _pick(column_quantiles_nb, column_quantiles_np)(x, np.asarray(qs, dtype=np.float64).reshape(-1))
