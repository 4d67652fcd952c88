"""Payoffs, Monte Carlo prices with a learned hedging control variate, implied vols."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffkit as dk
from . import kernels
from .diffkit import Tensor
from .nets import Mlp, init_glorot
from .refmodels import bs_call
from .sde import PathBatch

__all__ = [
    "OptionSpec", "PriceEstimate", "HedgeNet", "payoff", "cv_values", "mc_price_cv",
    "mc_prices", "cv_loss", "implied_vol", "ArbitrageBoundError", "IV_BRACKET",
]

CALL = "european_call"
LOOKBACK = "floating_lookback_put"
IV_BRACKET = (1e-4, 5.0)


@dataclass(frozen=True)
class OptionSpec:
    kind: str
    maturity_index: int
    strike: float | None = None

    def __post_init__(self):
        if self.kind not in (CALL, LOOKBACK):
            raise ValueError(f"unknown option kind {self.kind!r}")
        if self.maturity_index < 1:
            raise ValueError("maturity index must be >= 1")
        if self.kind == CALL and not (self.strike is not None and self.strike > 0):
            raise ValueError("a call needs a positive strike")

    @classmethod
    def call(cls, strike: float, maturity_index: int) -> "OptionSpec":
        return cls(CALL, int(maturity_index), float(strike))

    @classmethod
    def lookback_put(cls, maturity_index: int) -> "OptionSpec":
        return cls(LOOKBACK, int(maturity_index))


@dataclass(frozen=True)
class PriceEstimate:
    mean: float
    stderr: float
    M: int
    control_variate: bool


def payoff(spec: OptionSpec, S) -> np.ndarray | float:
    """Undiscounted payoff on one path (1-D) or on every row of an (M, N+1) array."""
    S = np.asarray(S, dtype=np.float64)
    single = S.ndim == 1
    S2 = S[None, :] if single else S
    if spec.maturity_index >= S2.shape[1]:
        raise ValueError("path does not cover the option maturity")
    if spec.kind == CALL:
        out = np.maximum(S2[:, spec.maturity_index] - spec.strike, 0.0)
    else:
        out = kernels.lookback_put(S2, spec.maturity_index)
    return float(out[0]) if single else out


class HedgeNet:
    """Hedge ratios h(t/T, S/S0[, V]) with one output per calibrated option."""

    def __init__(self, n_options: int, hidden: Sequence[int] = (32, 32), use_v: bool = False,
                 S0: float = 1.0, horizon: float = 1.0, net: Mlp | None = None):
        self.use_v = bool(use_v)
        self.S0 = float(S0)
        self.horizon = float(horizon)
        n_in = 3 if self.use_v else 2
        self.net = net if net is not None else Mlp([n_in, *hidden, n_options], "identity", name="hedge")
        if self.net.n_in != n_in or self.net.n_out != n_options:
            raise ValueError("hedge network shape does not match the option count")

    @property
    def n_options(self) -> int:
        return self.net.n_out

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def init(self, gain: float, rng: np.random.Generator) -> "HedgeNet":
        init_glorot(self.net, gain, rng)
        return self

    def __call__(self, t, S, V=None) -> Tensor:
        """Hedge ratios (M, J); ``t`` is a scalar or one time per row."""
        S = dk.constant(S)
        m = S.shape[0]
        t = np.asarray(t, dtype=np.float64)
        cols = [np.broadcast_to(t / self.horizon, (m,)).copy(), S * (1.0 / self.S0)]
        if self.use_v:
            cols.append(V if V is not None else np.zeros(m))
        return self.net(dk.columns(cols))


def _split(specs: Sequence[OptionSpec]):
    if any(s.kind != CALL for s in specs):
        raise ValueError("only European calls enter the control-variate estimator")
    idx = np.array([s.maturity_index for s in specs])
    strikes = np.array([s.strike for s in specs])
    return idx, strikes


def cv_values(paths: PathBatch, specs: Sequence[OptionSpec], hedge: HedgeNet | None,
              r: float, d: float = 0.0, through_paths: bool = True) -> Tensor:
    """Per-path control-variate values, an (M, J) tensor.

    value_ij = e^{-r T_j} (S_{T_j} - K_j)^+ - sum_{n < idx_j} h_j(t_n, S_n) (S~_{n+1} - S~_n)
    with S~_t = e^{-(r-d) t} S_t. With ``through_paths`` the result is
    differentiable with respect to the model parameters behind ``paths``;
    otherwise the paths enter as constants (hedge training).
    """
    idx, strikes = _split(specs)
    t = paths.grid.times
    if idx.max() > paths.n_steps:
        raise ValueError("option maturity lies beyond the simulated grid")

    n_max = int(idx.max())
    if through_paths:
        s_nodes = [paths.S_node(n) for n in range(n_max + 1)]
        v_nodes = [paths.V_nodes[n] for n in range(n_max)]
    else:
        S_arr, V_arr = paths.S, paths.V
        s_nodes = [Tensor(S_arr[:, n]) for n in range(n_max + 1)]
        v_nodes = [V_arr[:, n] for n in range(n_max)]

    cols = []
    for n, k in zip(idx, strikes):
        disc = math.exp(-r * t[n])
        cols.append(dk.relu(s_nodes[int(n)] - k) * disc)
    value = dk.columns(cols)
    if hedge is None:
        return value
    if hedge.n_options != len(specs):
        raise ValueError("hedge output count differs from the number of options")

    # all steps in one network pass: rows are ordered (step, path)
    m = paths.M
    J = len(specs)
    s_left = dk.concat(s_nodes[:-1])
    v_left = None
    if hedge.use_v:
        v_left = dk.concat([np.broadcast_to(dk.constant(v).data, (m,)) if not isinstance(v, Tensor)
                            or v.shape != (m,) else v for v in v_nodes])
    h = dk.reshape(hedge(np.repeat(t[:n_max], m), s_left, v_left), (n_max, m, J))
    growth = np.exp(-(r - d) * t[: n_max + 1])
    disc_s = [s_nodes[n] * growth[n] for n in range(n_max + 1)]
    ds = dk.reshape(dk.concat(disc_s[1:]) - dk.concat(disc_s[:-1]), (n_max, m, 1))
    mask = (np.arange(n_max)[:, None] < idx[None, :]).astype(np.float64)[:, None, :]
    leg = dk.sum(h * ds * mask, axis=0)
    return value - leg


def _estimate(values: np.ndarray, cv: bool) -> list[PriceEstimate]:
    m = values.shape[0]
    mean = values.mean(axis=0)
    err = values.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(mean)
    return [PriceEstimate(float(a), float(b), m, cv) for a, b in zip(mean, err)]


def mc_prices(paths: PathBatch, specs: Sequence[OptionSpec], hedge: HedgeNet | None,
              r: float, d: float = 0.0) -> list[PriceEstimate]:
    """Price estimates (mean and stderr over paths) for calls, with or without hedge."""
    with dk.no_grad():
        vals = cv_values(paths, specs, hedge, r, d, through_paths=False).data
    return _estimate(vals, hedge is not None)


def mc_price_cv(paths: PathBatch, spec: OptionSpec, hedge: HedgeNet | None = None,
                r: float = 0.0, d: float = 0.0, output: int = 0) -> PriceEstimate:
    """Single option; ``output`` selects the hedge network's output for this option.

    Lookback puts are priced by plain Monte Carlo.
    """
    if spec.kind == LOOKBACK:
        disc = math.exp(-r * paths.grid.times[spec.maturity_index])
        return _estimate((disc * payoff(spec, paths.S))[:, None], False)[0]
    if hedge is None:
        return mc_prices(paths, [spec], None, r, d)[0]
    specs = [spec] * hedge.n_options
    return mc_prices(paths, specs, hedge, r, d)[output]


def sample_variance_sum(values: Tensor) -> Tensor:
    """Sum over columns of the unbiased sample variance over rows."""
    m = values.shape[0]
    if m < 2:
        raise ValueError("sample variance needs at least two paths")
    centred = values - dk.mean(values, axis=0)
    return dk.sum(dk.square(centred)) * (1.0 / (m - 1))


def cv_loss(paths: PathBatch, specs: Sequence[OptionSpec], hedge: HedgeNet | None,
            r: float, d: float = 0.0) -> Tensor:
    """Sum of per-option sample variances of the CV-adjusted payoff (paths held fixed)."""
    return sample_variance_sum(cv_values(paths, specs, hedge, r, d, through_paths=False))


# ------------------------------------------------------------------ implied vol


class ArbitrageBoundError(ValueError):
    pass


def _vega(S0, K, T, sigma, r, d):
    sd = sigma * np.sqrt(T)
    d1 = (np.log(S0 / K) + (r - d) * T + 0.5 * sd * sd) / sd
    return S0 * np.exp(-d * T) * np.sqrt(T) * np.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)


def implied_vol(price, S0, K, T, r=0.0, d=0.0, errors: str = "raise", tol: float = 1e-10,
                max_iter: int = 200):
    """Black-Scholes implied volatility by safeguarded Newton iteration.

    Each cell keeps a bracket inside [1e-4, 5]; a Newton step that leaves the
    bracket is replaced by bisection. Converged when |residual| < tol * S0.

    ``errors="raise"`` raises :class:`ArbitrageBoundError` (naming the bound)
    for prices outside the no-arbitrage interval or outside the bracket;
    ``errors="nan"`` marks such cells NaN instead.
    """
    price, S0, K, T, r, d = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64)
                                                  for x in (price, S0, K, T, r, d)))
    shape = price.shape
    price, S0, K, T, r, d = (x.ravel() for x in (price, S0, K, T, r, d))
    out = np.full(price.shape, np.nan)
    fwd = S0 * np.exp(-d * T)
    lower = np.maximum(fwd - K * np.exp(-r * T), 0.0)
    lo_s, hi_s = IV_BRACKET
    problems = []
    bad = ~np.isfinite(price) | (T <= 0)
    if np.any(bad & (T <= 0)):
        problems.append("non-positive maturity")
    below = ~bad & (price <= lower)
    above = ~bad & (price >= fwd)
    if below.any():
        problems.append("price at or below the lower no-arbitrage bound (discounted intrinsic value)")
    if above.any():
        problems.append("price at or above the upper no-arbitrage bound S0*exp(-d*T)")
    live = ~(bad | below | above)
    p_lo = np.where(live, bs_call(S0, K, np.where(live, T, 1.0), lo_s, r, d), 0.0)
    p_hi = np.where(live, bs_call(S0, K, np.where(live, T, 1.0), hi_s, r, d), 0.0)
    under = live & (price < p_lo - tol * S0)
    over = live & (price > p_hi + tol * S0)
    if under.any():
        problems.append(f"price implies volatility below the bracket minimum {lo_s}")
    if over.any():
        problems.append(f"price implies volatility above the bracket maximum {hi_s}")
    live &= ~(under | over)
    if problems and errors == "raise":
        raise ArbitrageBoundError("; ".join(problems))

    ii = np.flatnonzero(live)
    if ii.size:
        p, s0, k, tt, rr, dd = price[ii], S0[ii], K[ii], T[ii], r[ii], d[ii]
        a = np.full(ii.size, lo_s)
        b = np.full(ii.size, hi_s)
        # Brenner-Subrahmanyam start, clipped into the bracket
        x = np.clip(math.sqrt(2 * math.pi) * p / (s0 * np.sqrt(tt)), 0.05, 1.0)
        done = np.zeros(ii.size, dtype=bool)
        for _ in range(max_iter):
            f = bs_call(s0, k, tt, x, rr, dd) - p
            v = _vega(s0, k, tt, x, rr, dd)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = f / v
            # small residual alone is not enough where vega is tiny
            done |= (np.abs(f) < tol * s0) & (np.abs(newton) < 1e-12)
            if done.all():
                break
            a = np.where(f < 0, x, a)
            b = np.where(f > 0, x, b)
            step = x - newton
            bisect = ~np.isfinite(step) | (step <= a) | (step >= b)
            x_new = np.where(bisect, 0.5 * (a + b), step)
            x = np.where(done, x, x_new)
            done |= (b - a) < 1e-15 * np.maximum(1.0, x)
        f = bs_call(s0, k, tt, x, rr, dd) - p
        ok = np.abs(f) < tol * s0
        if not ok.all():
            # bracket collapsed to machine precision: accept the limit point
            ok |= (b - a) <= 4e-16 * np.maximum(1.0, x)
        if not ok.all() and errors == "raise":
            raise RuntimeError("implied volatility did not converge within the iteration cap")
        out[ii] = np.where(ok, x, np.nan)
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out
