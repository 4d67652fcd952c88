"""Likelihoods, prior and the Langevin calibration drivers.

The chain state is the network parameter vector theta of a
:class:`~nsdecal.sde.NeuralSDEModel`. Each epoch draws fresh Brownian
increments, takes one Langevin step on theta using the gradient of the log
posterior, then re-simulates with the same increments and trains the hedge
network (control variate) with Adam while theta is held fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .nets import AdamState, SgldConfig, adam_step, sgld_step
from .posterior import Chain
from .pricing import HedgeNet, OptionSpec, cv_loss, cv_values, mc_price_cv, sample_variance_sum
from .sde import NeuralSDEModel, SimulationError, TimeGrid, brownian_increments, p_drifts, simulate_q
from .streams import stream

log = logging.getLogger(__name__)

# consecutive skipped Langevin steps before a run is declared diverged
MAX_SKIPPED_STEPS = 20

__all__ = [
    "OptionDataset", "TimeSeriesDataset", "HyperParams", "spread_weights", "g_of_theta",
    "log_lik_options", "log_lik_timeseries", "log_prior", "Calibrator", "CalibrationError",
    "EpochRecord", "algorithm2_run",
]

LOG_2PI = math.log(2.0 * math.pi)


# ------------------------------------------------------------------------ data


def spread_weights(delta_i) -> tuple[np.ndarray, float, np.ndarray]:
    """Return (delta_i, delta^2, w_i) with delta^2 = 1 / sum(1/delta_i^2), w_i = delta^2/delta_i^2."""
    d = np.asarray(delta_i, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("at least one option is required")
    zero = np.flatnonzero(~(np.abs(d) > 0))
    if zero.size:
        raise ValueError(f"zero spread for option {int(zero[0])}")
    inv = 1.0 / (d * d)
    delta2 = 1.0 / inv.sum()
    return d, float(delta2), delta2 * inv


class OptionDataset:
    """European call quotes: strikes, maturities (years), mid prices and spreads.

    Spreads are in basis points of S0, delta_i = 1e4 / S0 * |ask - bid|. When
    no spread information is given every option gets delta_i = 1 (equal
    weights); a hyper-parameter override of delta is then expected.
    """

    def __init__(self, strikes, maturities, prices, S0: float, spreads_bp=None):
        self.strikes = np.asarray(strikes, dtype=np.float64).ravel()
        self.maturities = np.asarray(maturities, dtype=np.float64).ravel()
        self.prices = np.asarray(prices, dtype=np.float64).ravel()
        if not (self.strikes.size == self.maturities.size == self.prices.size):
            raise ValueError("strikes, maturities and prices differ in length")
        if not S0 > 0:
            raise ValueError("S0 must be positive")
        self.S0 = float(S0)
        if self.J == 0:
            self.delta_i = np.empty(0)
            self.delta2 = float("nan")
            self.weights = np.empty(0)
            return
        sp = np.ones(self.J) if spreads_bp is None else np.asarray(spreads_bp, dtype=np.float64).ravel()
        if sp.size != self.J:
            raise ValueError("one spread per option required")
        self.delta_i, self.delta2, self.weights = spread_weights(sp)

    @classmethod
    def from_quotes(cls, strikes, maturities, bid, ask, S0: float) -> "OptionDataset":
        bid = np.asarray(bid, dtype=np.float64)
        ask = np.asarray(ask, dtype=np.float64)
        return cls(strikes, maturities, 0.5 * (bid + ask), S0, 1e4 / S0 * np.abs(ask - bid))

    @classmethod
    def empty(cls, S0: float = 1.0) -> "OptionDataset":
        return cls([], [], [], S0)

    @property
    def J(self) -> int:
        return int(self.prices.size)

    def subset(self, mask) -> "OptionDataset":
        mask = np.asarray(mask)
        return OptionDataset(self.strikes[mask], self.maturities[mask], self.prices[mask], self.S0,
                             self.delta_i[mask] if self.J else None)

    def specs(self, grid: TimeGrid) -> list[OptionSpec]:
        return [OptionSpec.call(k, grid.index_of(t)) for k, t in zip(self.strikes, self.maturities)]


@dataclass
class TimeSeriesDataset:
    """Observed log-prices (and variances for two-factor models) on a time grid."""

    times: np.ndarray
    Y: np.ndarray
    V: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.V is not None:
            self.V = np.asarray(self.V, dtype=np.float64)
        n = self.times.size
        if self.Y.shape != (n,) or (self.V is not None and self.V.shape != (n,)):
            raise ValueError("observations must have one value per grid time")
        if n < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time-series grid must be strictly increasing with >= 2 points")

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


@dataclass
class HyperParams:
    """Sampler settings.

    ``sigma_prior=None`` uses each layer's Glorot scale as prior scale.
    ``delta`` (if set) replaces the spread-derived delta in the option likelihood.
    """

    step_size: float = 1e-6
    epochs: int = 100
    M: int = 1000
    sigma_prior: float | None = None
    segment_sigma_priors: list | None = None
    delta: float | None = None
    gain: float = 1.5
    noise: bool = True
    step_decay: float = 1.0
    burn_in: int = 0
    seed: int = 0
    hedge_lr: float = 1e-3
    hedge_steps: int = 1
    hedge_hidden: tuple = (32, 32)

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.epochs < 0 or self.burn_in < 0 or self.hedge_steps < 0:
            raise ValueError("epochs, burn_in and hedge_steps must be non-negative")
        for name in ("sigma_prior", "delta"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise and not self.step_size > 0:
            raise ValueError("step_size must be positive")


# ------------------------------------------------------------------ densities


def g_of_theta(model_prices, data: OptionDataset) -> Tensor:
    """Weighted squared pricing error in basis points: 1e8/S0^2 * sum w_i (C_i - C_mkt_i)^2."""
    c = dk.constant(model_prices)
    err = c - data.prices
    return dk.sum(dk.square(err) * data.weights) * (1e8 / data.S0 ** 2)


def log_lik_options(model_prices, data: OptionDataset, delta: float | None = None) -> Tensor:
    """-J/2 log 2pi - J/2 log delta^2 - G / (2 delta^2)."""
    if data.J == 0:
        return Tensor(np.array(0.0))
    d2 = data.delta2 if delta is None else float(delta) ** 2
    if not d2 > 0:
        raise ValueError("delta must be positive")
    J = data.J
    G = g_of_theta(model_prices, data)
    return G * (-0.5 / d2) + (-0.5 * J * LOG_2PI - 0.5 * J * math.log(d2))


def log_lik_timeseries(model: NeuralSDEModel, data: TimeSeriesDataset) -> Tensor:
    """Euler transition log-density of the observed series under the historical measure.

    Coefficients are evaluated at the observed states (t_n, Y_n, V_n). Per step,
    two-factor: -log 2pi - log(1-rho^2)/2 - Q / (2(1-rho^2)) - log sigma - log sigmaV - log dt
    with Q = psi^2 - 2 rho psi psiV + psiV^2; one-factor: the univariate
    -log(2pi)/2 - psi^2/2 - log sigma - log(dt)/2.
    """
    if model.zeta_net is None:
        raise ValueError("the time-series likelihood needs a market-price-of-risk network")
    two = model.two_factor
    if two and data.V is None:
        raise ValueError("a two-factor model needs observed variances")
    t = data.times[:-1]
    dt = data.dt
    y = data.Y[:-1]
    v = data.V[:-1] if two else np.full(t.size, model.V0)
    sqdt = np.sqrt(dt)
    sig = model.sigma(t, np.exp(y), v)
    sv = model.sigma_v(t, v) if two else None
    b_y, b_v = p_drifts(model, t, y, v, sig=sig, sv=sv)
    psi = (np.diff(data.Y) - b_y * dt) / (sig * sqdt)
    if not two:
        per = dk.square(psi) * (-0.5) - dk.log(sig) + (-0.5 * LOG_2PI - 0.5 * np.log(dt))
        return dk.sum(per)
    psi_v = (np.diff(data.V) - b_v * dt) / (sv * sqdt)
    rho = model.rho_value()
    if isinstance(rho, Tensor):
        one_m = 1.0 - dk.square(rho)
        if not one_m.data > 0:
            raise ValueError("|rho| = 1 gives a degenerate transition density")
        quad = dk.square(psi) - 2.0 * rho * psi * psi_v + dk.square(psi_v)
        per = quad / (one_m * -2.0) - dk.log(sig) - dk.log(sv) + (-LOG_2PI - np.log(dt))
        return dk.sum(per) - 0.5 * t.size * dk.log(one_m)
    if abs(rho) >= 1.0:
        raise ValueError("|rho| = 1 gives a degenerate transition density")
    one_m = 1.0 - rho * rho
    quad = dk.square(psi) - 2.0 * rho * psi * psi_v + dk.square(psi_v)
    per = quad * (-0.5 / one_m) - dk.log(sig) - dk.log(sv) + (-LOG_2PI - 0.5 * math.log(one_m) - np.log(dt))
    return dk.sum(per)


def log_prior(params: Sequence[Tensor], sigma_prior) -> Tensor:
    """-sum ||theta||^2 / (2 sigma_prior^2) (additive constant dropped).

    ``sigma_prior`` is a scalar or one scale per tensor.
    """
    scales = [float(sigma_prior)] * len(params) if np.isscalar(sigma_prior) else list(sigma_prior)
    if len(scales) != len(params):
        raise ValueError("one prior scale per parameter tensor required")
    total = None
    for p, s in zip(params, scales):
        if not s > 0:
            raise ValueError("sigma_prior must be positive")
        term = dk.sum(dk.square(p)) * (-0.5 / (s * s))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.array(0.0))


# --------------------------------------------------------------------- drivers


class CalibrationError(RuntimeError):
    def __init__(self, epoch: int, stage: int, cause: Exception):
        super().__init__(f"stage {stage}, epoch {epoch}: {cause}")
        self.epoch = epoch
        self.stage = stage


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    log_post: float
    G: float
    prices: np.ndarray
    lookbacks: np.ndarray
    cv_loss: float
    step_size: float
    applied: bool


@dataclass
class _Stage:
    index: int
    option_ids: np.ndarray
    data: OptionDataset
    specs: list
    hedge: HedgeNet | None
    adam: AdamState
    sgld: SgldConfig
    segments: list | None
    n_sim: int = 0
    skipped_in_row: int = 0


class Calibrator:
    """Runs the Langevin calibration of ``model`` to option prices and/or a time series.

    Parameters
    ----------
    model : NeuralSDEModel
        Initialised model; its parameters are updated in place.
    grid : TimeGrid
        Simulation grid; every option maturity must be a grid point.
    options : OptionDataset, optional
    timeseries : TimeSeriesDataset, optional
        Enables the joint (historical + pricing measure) posterior.
    hyper : HyperParams
    lookback_maturities : sequence of float
        Floating lookback puts priced each epoch by plain Monte Carlo; they
        never enter the objective.
    """

    def __init__(self, model: NeuralSDEModel, grid: TimeGrid, options: OptionDataset | None = None,
                 timeseries: TimeSeriesDataset | None = None, hyper: HyperParams | None = None,
                 lookback_maturities: Sequence[float] = ()):
        self.model = model
        self.grid = grid
        self.options = options if options is not None else OptionDataset.empty(model.S0)
        self.timeseries = timeseries
        self.hyper = hyper or HyperParams()
        if self.timeseries is not None and model.zeta_net is None:
            raise ValueError("joint calibration needs a market-price-of-risk network")
        self.lookbacks = [OptionSpec.lookback_put(grid.index_of(t)) for t in lookback_maturities]
        self.lookback_maturities = list(lookback_maturities)
        J = self.options.J
        names = (["log_post", "G"] + [f"price_{i + 1}" for i in range(J)]
                 + [f"lookback_{i + 1}" for i in range(len(self.lookbacks))] + ["cv_loss", "step_size"])
        self.chain = Chain(names)
        self.specs = self.options.specs(grid)

    # ------------------------------------------------------------ stage setup

    def _make_stage(self, index: int, option_ids, segments) -> _Stage:
        h = self.hyper
        ids = np.asarray(option_ids, dtype=np.int64)
        data = self.options.subset(ids) if self.options.J else self.options
        specs = [self.specs[i] for i in ids]
        hedge = None
        if specs:
            hedge = HedgeNet(len(specs), h.hedge_hidden, use_v=self.model.two_factor,
                             S0=self.model.S0, horizon=self.model.horizon)
            hedge.init(h.gain, stream(h.seed, "hedge-init", index))
        stage = _Stage(index, ids, data, specs, hedge, AdamState(lr=h.hedge_lr),
                       SgldConfig(h.step_size, h.noise, h.step_decay), segments)
        idx = [s.maturity_index for s in specs] + [s.maturity_index for s in self.lookbacks]
        stage.n_sim = max(idx) if idx else 0
        return stage

    def _prior_scales(self, segments):
        h = self.hyper
        return self.model.prior_scales(h.gain, h.sigma_prior, h.segment_sigma_priors, segments,
                                       include_zeta=self.timeseries is not None)

    def _active_params(self, segments):
        return self.model.parameters(segments, include_zeta=self.timeseries is not None)

    # ------------------------------------------------------------------ epoch

    def log_posterior(self, increments=None, stage: _Stage | None = None) -> Tensor:
        """Log prior + option log-likelihood (+ time-series term) on the given increments.

        Differentiable in whichever model parameters currently require grad.
        """
        st = stage or self._default_stage()
        h, model = self.hyper, self.model
        post = log_prior(self._active_params(st.segments), self._prior_scales(st.segments))
        if st.specs:
            if increments is None:
                raise ValueError("option pricing needs Brownian increments")
            paths = simulate_q(model, self.grid, increments=increments)
            vals = cv_values(paths, st.specs, st.hedge, model.r, model.d, through_paths=True)
            post = post + log_lik_options(dk.mean(vals, axis=0), st.data, h.delta)
        if self.timeseries is not None:
            post = post + log_lik_timeseries(model, self.timeseries)
        return post

    def _epoch(self, epoch: int, st: _Stage) -> EpochRecord:
        h, model = self.hyper, self.model
        r, d = model.r, model.d
        params = self._active_params(st.segments)
        scales = self._prior_scales(st.segments)
        model.requires_grad_(False)
        for p in params:
            p.requires_grad = True

        inc = None
        if st.n_sim > 0:
            inc = brownian_increments(self.grid, h.M, stream(h.seed, "paths", st.index, epoch), st.n_sim)

        # Langevin step on theta (hedge held fixed)
        post = self.log_posterior(inc, st)
        grads = dk.gradients(post, params)
        step_used = st.sgld.step_size
        applied = sgld_step(params, grads, st.sgld, stream(h.seed, "sgld", st.index, epoch))
        st.skipped_in_row = 0 if applied else st.skipped_in_row + 1
        if st.skipped_in_row >= MAX_SKIPPED_STEPS:
            raise FloatingPointError(f"{st.skipped_in_row} consecutive non-finite gradients; "
                                     f"the chain has left the region where the posterior is finite")
        model.requires_grad_(False)

        # hedge training on re-simulated paths (theta fixed), then record the draw
        loss = float("nan")
        prices_now = np.empty(0)
        look = np.empty(0)
        G = 0.0
        with dk.no_grad():
            paths = simulate_q(model, self.grid, increments=inc) if inc is not None else None
        if st.hedge is not None:
            for _ in range(h.hedge_steps):
                lval = cv_loss(paths, st.specs, st.hedge, r, d)
                g = dk.gradients(lval, st.hedge.parameters())
                try:
                    adam_step(st.hedge.parameters(), g, st.adam)
                except FloatingPointError as exc:
                    log.warning("hedge update skipped: %s", exc)
                    break
        with dk.no_grad():
            lp = float(log_prior(params, scales).data)
            if st.specs:
                vals = cv_values(paths, st.specs, st.hedge, r, d, through_paths=False)
                loss = float(sample_variance_sum(vals).data)
                prices_now = vals.data.mean(axis=0)
                G = float(g_of_theta(prices_now, st.data).data)
                lp += float(log_lik_options(prices_now, st.data, h.delta).data)
            if self.timeseries is not None:
                lp += float(log_lik_timeseries(model, self.timeseries).data)
            if self.lookbacks:
                look = np.array([mc_price_cv(paths, s, None, r, d).mean for s in self.lookbacks])
        return EpochRecord(epoch, st.index, lp, G, prices_now, look, loss, step_used, applied)

    def _record(self, rec: EpochRecord, st: _Stage) -> None:
        row = {"log_post": rec.log_post, "G": rec.G, "cv_loss": rec.cv_loss, "step_size": rec.step_size}
        for i, p in zip(st.option_ids, rec.prices):
            row[f"price_{i + 1}"] = p
        for i, p in enumerate(rec.lookbacks):
            row[f"lookback_{i + 1}"] = p
        self.chain.append(rec.epoch, row, rec.stage)

    def _run_stage(self, st: _Stage, epochs: int, callback: Callable | None) -> None:
        for e in range(epochs):
            try:
                rec = self._epoch(e, st)
            except (SimulationError, FloatingPointError, ValueError) as exc:
                raise CalibrationError(e, st.index, exc) from exc
            self._record(rec, st)
            if callback is not None:
                callback(rec)

    # -------------------------------------------------------------- public API

    def algorithm1_epoch(self, epoch: int, stage: _Stage | None = None) -> EpochRecord:
        """One epoch on the option likelihood (plus the time series if configured)."""
        st = stage or self._default_stage()
        rec = self._epoch(epoch, st)
        self._record(rec, st)
        return rec

    algorithm1_1_epoch = algorithm1_epoch

    def _default_stage(self) -> _Stage:
        if not hasattr(self, "_stage0"):
            self._stage0 = self._make_stage(0, np.arange(self.options.J), None)
        return self._stage0

    @property
    def hedge(self) -> HedgeNet | None:
        return self._default_stage().hedge

    def run(self, epochs: int | None = None, callback: Callable | None = None) -> Chain:
        """Unstaged run (one chain over all options and segments)."""
        self._run_stage(self._default_stage(), self.hyper.epochs if epochs is None else epochs, callback)
        return self.chain


def option_segments(model: NeuralSDEModel, maturities) -> np.ndarray:
    """Segment index of each option: the first segment whose end is >= its maturity."""
    k = np.searchsorted(model.segment_ends, np.asarray(maturities) - 1e-12, side="left")
    return np.minimum(k, model.n_segments - 1)


def algorithm2_run(cal: Calibrator, epochs_per_stage: int | None = None,
                   callback: Callable | None = None) -> tuple[Chain, list]:
    """Staged calibration: stage k samples only segment k, earlier segments stay frozen.

    Options are assigned to the segment that ends at (or first after) their
    maturity. Each stage gets its own hedge network. Returns the chain and the
    per-stage hedges.
    """
    model = cal.model
    if cal.timeseries is not None:
        raise ValueError("staged calibration uses option data only")
    seg = option_segments(model, cal.options.maturities)
    missing = sorted(set(range(model.n_segments)) - set(seg.tolist()))
    if missing:
        raise ValueError(f"no options fall in maturity segment(s) {missing}")
    epochs = cal.hyper.epochs if epochs_per_stage is None else epochs_per_stage
    hedges = []
    for k in range(model.n_segments):
        ids = np.flatnonzero(seg == k)
        st = cal._make_stage(k, ids, [k])
        if model.n_segments == 1:
            st.segments = None
            cal._stage0 = st
        cal._run_stage(st, epochs, callback)
        hedges.append(st.hedge)
    return cal.chain, hedges
