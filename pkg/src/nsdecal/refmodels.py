"""Ground-truth generators: Black-Scholes, Heston (P and Q) and rough Bergomi."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import hyp2f1, ndtr

from . import kernels
from .sde import TimeGrid

__all__ = [
    "bs_call", "bs_put", "BSParams", "bs_simulate",
    "HestonParams", "HestonPaths", "heston_simulate", "heston_target_prices",
    "RBergomiParams", "RBergomiPaths", "volterra_covariance", "rbergomi_simulate",
    "rbergomi_target_surface", "BS_PAPER", "HESTON_PAPER", "RBERGOMI_PAPER",
]


# ------------------------------------------------------------------- Black-Scholes


def _bs(S0, K, T, sigma, r, d, call: bool):
    S0, K, T, sigma = (np.asarray(x, dtype=np.float64) for x in (S0, K, T, sigma))
    S0, K, T, sigma, r, d = np.broadcast_arrays(S0, K, T, sigma, np.asarray(r, float), np.asarray(d, float))
    fwd = S0 * np.exp(-d * T)
    disc_k = K * np.exp(-r * T)
    sign = 1.0 if call else -1.0
    intrinsic = np.atleast_1d(np.maximum(sign * (fwd - disc_k), 0.0))
    shape = fwd.shape
    fwd, disc_k, T, sigma, K = (np.atleast_1d(x) for x in (fwd, disc_k, T, sigma, K))
    if np.any(T <= 0):
        warnings.warn("non-positive maturity: returning intrinsic value", RuntimeWarning, stacklevel=3)
    out = intrinsic.copy()
    live = (T > 0) & (sigma > 0) & (K > 0)
    if np.any(live):
        sd = sigma[live] * np.sqrt(T[live])
        d1 = (np.log(fwd[live] / disc_k[live]) + 0.5 * sd * sd) / sd
        d2 = d1 - sd
        if call:
            out[live] = fwd[live] * ndtr(d1) - disc_k[live] * ndtr(d2)
        else:
            out[live] = disc_k[live] * ndtr(-d2) - fwd[live] * ndtr(-d1)
    zero_k = (T > 0) & (K <= 0)
    if call and np.any(zero_k):
        out[zero_k] = fwd[zero_k] - disc_k[zero_k]
    return out.reshape(shape) if shape else float(out[0])


def bs_call(S0, K, T, sigma, r=0.0, d=0.0):
    """Black-Scholes call with continuous dividend yield (vectorised)."""
    return _bs(S0, K, T, sigma, r, d, True)


def bs_put(S0, K, T, sigma, r=0.0, d=0.0):
    return _bs(S0, K, T, sigma, r, d, False)


@dataclass(frozen=True)
class BSParams:
    S0: float = 1.0
    sigma: float = 0.3
    r: float = 0.025
    d: float = 0.0
    mu: float = 0.05

    def __post_init__(self):
        if not self.S0 > 0 or not self.sigma > 0:
            raise ValueError("S0 and sigma must be positive")


def bs_simulate(p: BSParams, grid: TimeGrid, M: int, rng: np.random.Generator,
                measure: str = "P") -> np.ndarray:
    """Exact log-price paths (M, N+1) of geometric Brownian motion."""
    drift = (p.mu if measure == "P" else p.r - p.d) - 0.5 * p.sigma ** 2
    dt = grid.dt
    z = rng.standard_normal((M, grid.n_steps))
    inc = drift * dt + p.sigma * np.sqrt(dt) * z
    y = np.empty((M, grid.n_steps + 1))
    y[:, 0] = math.log(p.S0)
    np.cumsum(inc, axis=1, out=y[:, 1:])
    y[:, 1:] += y[:, :1]
    return y


# -------------------------------------------------------------------------- Heston


@dataclass(frozen=True)
class HestonParams:
    """Heston parameters under the historical measure plus a volatility risk premium.

    Under Q the variance mean-reverts with kappa_bar = kappa + lam towards
    theta_bar = kappa * theta / (kappa + lam).
    """

    mu: float
    kappa: float
    theta: float
    volvol: float
    V0: float
    rho: float
    lam: float = 0.0
    r: float = 0.0
    d: float = 0.0
    S0: float = 1.0

    def __post_init__(self):
        if not self.kappa_bar > 0:
            raise ValueError("kappa + lambda must be positive")
        if self.V0 < 0:
            raise ValueError("V0 must be non-negative")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")

    @property
    def kappa_bar(self) -> float:
        return self.kappa + self.lam

    @property
    def theta_bar(self) -> float:
        return self.kappa * self.theta / (self.kappa + self.lam)

    @classmethod
    def from_q(cls, kappa_bar: float, theta_bar: float, volvol: float, V0: float, rho: float,
               r: float, lam: float = 0.0, mu: float | None = None, d: float = 0.0,
               S0: float = 1.0) -> "HestonParams":
        """Build from risk-neutral (kappa_bar, theta_bar) and a premium lam."""
        kappa = kappa_bar - lam
        if not kappa > 0:
            raise ValueError("kappa_bar - lam must be positive")
        return cls(mu=r if mu is None else mu, kappa=kappa, theta=kappa_bar * theta_bar / kappa,
                   volvol=volvol, V0=V0, rho=rho, lam=lam, r=r, d=d, S0=S0)


@dataclass
class HestonPaths:
    grid: TimeGrid
    Y: np.ndarray
    V: np.ndarray
    measure: str

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.Y)


def heston_simulate(p: HestonParams, grid: TimeGrid, M: int, rng: np.random.Generator,
                    measure: str = "Q", refine: int = 1) -> HestonPaths:
    """Full-truncation Euler; states are returned on ``grid`` (sub-stepped ``refine`` times)."""
    if measure not in ("P", "Q"):
        raise ValueError("measure must be 'P' or 'Q'")
    fine = grid.refine(refine) if refine > 1 else grid
    z = rng.standard_normal((M, 2, fine.n_steps))
    sq = np.sqrt(fine.dt)
    dw1 = z[:, 0, :] * sq
    dw2 = p.rho * dw1 + math.sqrt(1.0 - p.rho ** 2) * z[:, 1, :] * sq
    if measure == "Q":
        mu, kappa, theta = p.r - p.d, p.kappa_bar, p.theta_bar
    else:
        mu, kappa, theta = p.mu, p.kappa, p.theta
    y, v = kernels.heston_euler(math.log(p.S0), p.V0, mu, kappa, theta, p.volvol, fine.dt,
                                dw1, dw2, refine)
    if not (np.isfinite(y).all() and np.isfinite(v).all()):
        raise FloatingPointError("non-finite Heston state")
    return HestonPaths(grid, y, v, measure)


def heston_target_prices(p: HestonParams, strikes, maturities, M: int, rng: np.random.Generator,
                         n_steps: int = 96, refine: int = 10, chunk: int = 20_000,
                         puts: bool = False):
    """Discounted MC call (and optionally put) prices under Q.

    Returns ``(prices, stderr)`` of shape (len(maturities), len(strikes)), or
    ``(calls, call_err, puts, put_err)`` when ``puts`` is set. Maturities are
    merged into a uniform grid with ``n_steps`` steps up to the last one.
    """
    strikes = np.asarray(strikes, dtype=np.float64)
    mats = np.asarray(maturities, dtype=np.float64)
    grid = TimeGrid.including(float(mats.max()), n_steps, mats)
    idx = [grid.index_of(t) for t in mats]
    acc = np.zeros((2, 2, len(mats), len(strikes)))  # (call/put, sum/sumsq)
    done = 0
    while done < M:
        m = min(chunk, M - done)
        s = heston_simulate(p, grid, m, rng, "Q", refine).S
        for a, (j, t) in enumerate(zip(idx, mats)):
            disc = math.exp(-p.r * t)
            st = s[:, j][:, None]
            c = disc * np.maximum(st - strikes, 0.0)
            acc[0, 0, a] += c.sum(axis=0)
            acc[0, 1, a] += (c * c).sum(axis=0)
            if puts:
                q = disc * np.maximum(strikes - st, 0.0)
                acc[1, 0, a] += q.sum(axis=0)
                acc[1, 1, a] += (q * q).sum(axis=0)
        done += m
    mean = acc[:, 0] / M
    var = np.maximum(acc[:, 1] / M - mean ** 2, 0.0) * M / max(M - 1, 1)
    err = np.sqrt(var / M)
    if puts:
        return mean[0], err[0], mean[1], err[1]
    return mean[0], err[0]


# ----------------------------------------------------------------- rough Bergomi


@dataclass(frozen=True)
class RBergomiParams:
    a: float = -0.43
    eta: float = 1.9
    xi: float = 0.235 ** 2
    rho: float = -0.5
    S0: float = 1.0
    r: float = 0.0

    def __post_init__(self):
        if not -0.5 < self.a < 0:
            raise ValueError("a must lie in (-1/2, 0)")
        if not self.eta > 0 or not self.xi > 0 or not self.S0 > 0:
            raise ValueError("eta, xi and S0 must be positive")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")


def volterra_covariance(times, a: float) -> np.ndarray:
    """Joint covariance of (Y_{t_1..t_n}, W_{t_1..t_n}) for Y_t = sqrt(2a+1) int_0^t (t-u)^a dW_u.

    Cov(Y_s, Y_t) = (2a+1)/(a+1) s^{a+1} t^a 2F1(1, -a; a+2; s/t) for s <= t,
    Cov(Y_t, W_s) = sqrt(2a+1)/(a+1) (t^{a+1} - (t - min(s,t))^{a+1}),
    Cov(W_s, W_t) = min(s, t).
    """
    t = np.asarray(times, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("covariance times must be positive")
    n = t.size
    lo = np.minimum.outer(t, t)
    hi = np.maximum.outer(t, t)
    yy = (2 * a + 1) / (a + 1) * lo ** (a + 1) * hi ** a * hyp2f1(1.0, -a, a + 2.0, lo / hi)
    tt = t[:, None]
    yw = math.sqrt(2 * a + 1) / (a + 1) * (tt ** (a + 1) - (tt - lo) ** (a + 1))
    cov = np.empty((2 * n, 2 * n))
    cov[:n, :n] = yy
    cov[:n, n:] = yw
    cov[n:, :n] = yw.T
    cov[n:, n:] = lo
    return cov


def _cholesky(cov: np.ndarray, max_jitter: float = 1e-10) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = 1e-14 if jitter == 0.0 else jitter * 10
            if jitter > max_jitter:
                raise np.linalg.LinAlgError(
                    "Volterra covariance is not positive definite even with jitter 1e-10; "
                    "use fewer or less closely spaced grid points") from None


@dataclass
class RBergomiPaths:
    grid: TimeGrid
    Y: np.ndarray     # log-price
    V: np.ndarray
    volterra: np.ndarray
    dW1: np.ndarray

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.Y)


def rbergomi_simulate(p: RBergomiParams, grid: TimeGrid, M: int, rng: np.random.Generator,
                      chunk: int = 20_000) -> RBergomiPaths:
    """Exact Volterra sampling on the grid, then log-Euler for the price."""
    if not grid.is_uniform():
        raise ValueError("rough Bergomi simulation needs a uniform grid")
    t = grid.times[1:]
    n = t.size
    L = _cholesky(volterra_covariance(t, p.a))
    vol = np.empty((M, n + 1))
    w2 = np.empty((M, n + 1))
    vol[:, 0] = 0.0
    w2[:, 0] = 0.0
    du = np.empty((M, n))
    sq = np.sqrt(grid.dt)
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        z = rng.standard_normal((hi - lo, 2 * n + n))
        g = z[:, : 2 * n] @ L.T
        vol[lo:hi, 1:] = g[:, :n]
        w2[lo:hi, 1:] = g[:, n:]
        du[lo:hi] = z[:, 2 * n:] * sq
    dw2 = np.diff(w2, axis=1)
    dw1 = p.rho * dw2 + math.sqrt(1.0 - p.rho ** 2) * du
    tt = grid.times
    V = p.xi * np.exp(p.eta * vol - 0.5 * p.eta ** 2 * tt ** (2 * p.a + 1))
    Y = kernels.log_euler(math.log(p.S0), V[:, :-1], dw1, grid.dt, p.r)
    return RBergomiPaths(grid, Y, V, vol, dw1)


def rbergomi_target_surface(p: RBergomiParams, log_strikes, maturities, M: int,
                            rng: np.random.Generator, n_steps: int = 96, horizon: float = 1.0):
    """MC call prices and implied vols on a (maturity x log-strike) grid.

    Returns ``(prices, stderr, implied_vols)``; cells whose inversion fails are NaN.
    """
    from .pricing import implied_vol

    k = np.asarray(log_strikes, dtype=np.float64)
    mats = np.asarray(maturities, dtype=np.float64)
    grid = TimeGrid.uniform(horizon, n_steps)
    idx = [grid.index_of(t) for t in mats]
    s = rbergomi_simulate(p, grid, M, rng).S
    strikes = p.S0 * np.exp(k)
    prices = np.empty((len(mats), len(k)))
    err = np.empty_like(prices)
    for a, (j, T) in enumerate(zip(idx, mats)):
        pay = math.exp(-p.r * T) * np.maximum(s[:, j][:, None] - strikes, 0.0)
        prices[a] = pay.mean(axis=0)
        err[a] = pay.std(axis=0, ddof=1) / math.sqrt(M)
    ivs = implied_vol(prices, p.S0, strikes[None, :], mats[:, None], p.r, 0.0, errors="nan")
    return prices, err, ivs


# ------------------------------------------------------------------------ presets

BS_PAPER = BSParams(S0=1.0, sigma=0.3, r=0.025, d=0.0, mu=0.05)
HESTON_PAPER = HestonParams.from_q(kappa_bar=0.78, theta_bar=0.11, volvol=0.68, V0=0.04, rho=0.044,
                                   r=0.025, lam=0.2, mu=0.25)
RBERGOMI_PAPER = RBergomiParams(a=-0.43, eta=1.9, xi=0.235 ** 2, rho=-0.5, S0=1.0, r=0.0)


def with_overrides(params, **kw):
    return replace(params, **kw)
