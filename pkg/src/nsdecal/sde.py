"""Neural SDE stochastic-volatility model and its Euler-Maruyama simulation.

Under the pricing measure the log-price and variance follow

    dY = (r - d - sigma^2 / 2) dt + sigma(t, S, V) dW1
    dV = bV(t, V) dt + sigmaV(t, V) dW2,   dW2 = rho dW1 + sqrt(1 - rho^2) dU

with every coefficient a small network. Under the historical measure the two
drifts are shifted by the market price of risk network ``zeta`` (see
:func:`p_drifts`). Network inputs are normalised: time as t / horizon, price
as S / S0 and log-price as Y - log S0.

A model built with ``factors=1`` has no variance networks; V then stays at V0
and the price network only sees (t, S).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .nets import Mlp, init_glorot

__all__ = [
    "TimeGrid", "NeuralSDEModel", "PathBatch", "SimulationError",
    "brownian_increments", "correlate", "simulate_q", "simulate_p", "p_drifts",
]


class SimulationError(RuntimeError):
    def __init__(self, msg: str, step: int, paths: np.ndarray):
        super().__init__(f"{msg} at step {step} ({len(paths)} paths affected)")
        self.step = step
        self.paths = paths


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        return cls(np.linspace(0.0, horizon, int(n_steps) + 1))

    @classmethod
    def including(cls, horizon: float, n_steps: int, points: Sequence[float], tol: float = 1e-9) -> "TimeGrid":
        """Uniform grid on [0, horizon] with extra points (e.g. maturities) merged in."""
        base = np.linspace(0.0, horizon, int(n_steps) + 1)
        extra = [p for p in points if 0 < p <= horizon + tol and np.min(np.abs(base - p)) > tol]
        if not extra:
            return cls(base)
        return cls(np.unique(np.concatenate([base, np.asarray(extra, dtype=np.float64)])))

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise ValueError(f"time {t} is not a grid point")
        return i

    def refine(self, k: int) -> "TimeGrid":
        pieces = [np.linspace(a, b, k + 1)[:-1] for a, b in zip(self.times[:-1], self.times[1:])]
        return TimeGrid(np.concatenate(pieces + [self.times[-1:]]))

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        dt = self.dt
        return bool(np.allclose(dt, dt[0], rtol=rtol, atol=0.0))


class NeuralSDEModel:
    """Networks and constants defining the neural SDE under both measures.

    ``sigma_nets``, ``bV_nets`` and ``sigmaV_nets`` hold one network per
    maturity segment; ``segment_ends`` gives the right end of each segment,
    so the coefficient used at time t is the one of the first segment with
    t < end (the last segment also covers t >= its end).
    """

    def __init__(self, sigma_nets: Sequence[Mlp], bV_nets: Sequence[Mlp] | None = None,
                 sigmaV_nets: Sequence[Mlp] | None = None, zeta_net: Mlp | None = None,
                 rho: float = 0.0, r: float = 0.0, d: float = 0.0, S0: float = 1.0, V0: float = 0.04,
                 horizon: float = 1.0, segment_ends: Sequence[float] | None = None,
                 rho_trainable: bool = False):
        self.sigma_nets = list(sigma_nets)
        self.bV_nets = list(bV_nets) if bV_nets else None
        self.sigmaV_nets = list(sigmaV_nets) if sigmaV_nets else None
        if (self.bV_nets is None) != (self.sigmaV_nets is None):
            raise ValueError("bV and sigmaV networks must be given together")
        self.zeta_net = zeta_net
        if not -1.0 <= rho <= 1.0:
            raise ValueError(f"|rho| must be <= 1, got {rho}")
        self.r, self.d, self.S0, self.V0 = float(r), float(d), float(S0), float(V0)
        if not self.S0 > 0:
            raise ValueError("S0 must be positive")
        if self.two_factor and not self.V0 > 0:
            raise ValueError("V0 must be positive for a two-factor model")
        self.horizon = float(horizon)
        n_seg = len(self.sigma_nets)
        if segment_ends is None:
            segment_ends = [self.horizon] if n_seg == 1 else None
        if segment_ends is None or len(segment_ends) != n_seg:
            raise ValueError("segment_ends must list one end time per segment")
        ends = np.asarray(segment_ends, dtype=np.float64)
        if np.any(np.diff(ends) <= 0) or ends[0] <= 0:
            raise ValueError("segment ends must be positive and increasing")
        self.segment_ends = ends
        if self.two_factor and not (len(self.bV_nets) == len(self.sigmaV_nets) == n_seg):
            raise ValueError("one variance network pair per segment required")
        self.rho_trainable = bool(rho_trainable)
        if self.rho_trainable:
            if abs(rho) >= 1.0:
                raise ValueError("trainable rho needs |rho| < 1")
            self.rho_raw = Tensor(np.array(math.atanh(rho)), requires_grad=True, name="rho_raw")
            self._rho = None
        else:
            self.rho_raw = None
            self._rho = float(rho)

    # --------------------------------------------------------------- construction

    @classmethod
    def build(cls, hidden: Sequence[int] = (32, 32), factors: int = 2, with_zeta: bool = False,
              n_segments: int = 1, segment_ends: Sequence[float] | None = None,
              rho: float = 0.0, r: float = 0.0, d: float = 0.0, S0: float = 1.0, V0: float = 0.04,
              horizon: float = 1.0, gain: float = 1.5, rng: np.random.Generator | None = None,
              rho_trainable: bool = False) -> "NeuralSDEModel":
        if factors not in (1, 2):
            raise ValueError("factors must be 1 or 2")
        hidden = list(hidden)
        n_price_in = 3 if factors == 2 else 2
        sig, bv, sv = [], [], []
        for k in range(n_segments):
            sig.append(Mlp([n_price_in] + hidden + [1], "softplus", name=f"sigma{k}"))
            if factors == 2:
                bv.append(Mlp([2] + hidden + [1], "identity", name=f"bV{k}"))
                sv.append(Mlp([2] + hidden + [1], "softplus", name=f"sigmaV{k}"))
        zeta = Mlp([n_price_in] + hidden + [2], "identity", name="zeta") if with_zeta else None
        model = cls(sig, bv or None, sv or None, zeta, rho=rho, r=r, d=d, S0=S0, V0=V0,
                    horizon=horizon, segment_ends=segment_ends, rho_trainable=rho_trainable)
        if rng is not None:
            for net in model.networks():
                init_glorot(net, gain, rng)
        return model

    # ------------------------------------------------------------------ structure

    @property
    def two_factor(self) -> bool:
        return self.bV_nets is not None

    @property
    def n_segments(self) -> int:
        return len(self.sigma_nets)

    def segment_networks(self, k: int) -> list[Mlp]:
        nets = [self.sigma_nets[k]]
        if self.two_factor:
            nets += [self.bV_nets[k], self.sigmaV_nets[k]]
        return nets

    def networks(self) -> list[Mlp]:
        nets = []
        for k in range(self.n_segments):
            nets += self.segment_networks(k)
        if self.zeta_net is not None:
            nets.append(self.zeta_net)
        return nets

    def parameters(self, segments: Sequence[int] | None = None, include_zeta: bool = True) -> list[Tensor]:
        """Trainable tensors (theta), optionally restricted to some segments."""
        segs = range(self.n_segments) if segments is None else segments
        out = []
        for k in segs:
            for net in self.segment_networks(k):
                out += net.parameters()
        if include_zeta and self.zeta_net is not None:
            out += self.zeta_net.parameters()
        if self.rho_raw is not None:
            out.append(self.rho_raw)
        return out

    def prior_scales(self, gain: float, sigma_prior: float | None = None,
                     segment_sigma_priors: Sequence[float] | None = None,
                     segments: Sequence[int] | None = None, include_zeta: bool = True) -> list[float]:
        """Prior standard deviation per tensor, aligned with :meth:`parameters`.

        Without an explicit value, each layer's Glorot scale is used.
        """
        segs = range(self.n_segments) if segments is None else segments
        out = []

        def scales(net, override):
            if override is not None:
                return [float(override)] * len(net.parameters())
            return net.layer_sigmas(gain)

        for k in segs:
            ov = segment_sigma_priors[k] if segment_sigma_priors is not None else sigma_prior
            for net in self.segment_networks(k):
                out += scales(net, ov)
        if include_zeta and self.zeta_net is not None:
            out += scales(self.zeta_net, sigma_prior)
        if self.rho_raw is not None:
            out.append(float(sigma_prior) if sigma_prior is not None else 1.0)
        return out

    def requires_grad_(self, flag: bool, segments: Sequence[int] | None = None) -> "NeuralSDEModel":
        for p in self.parameters(segments):
            p.requires_grad = flag
        return self

    def rho_value(self):
        """rho as a float, or as a Tensor (tanh of the raw parameter) when trainable."""
        if self.rho_raw is None:
            return self._rho
        return dk.tanh(self.rho_raw)

    @property
    def rho(self) -> float:
        return self._rho if self.rho_raw is None else float(np.tanh(self.rho_raw.data))

    def segment_of(self, t: float) -> int:
        k = int(np.searchsorted(self.segment_ends, t, side="right"))
        return min(k, self.n_segments - 1)

    # ------------------------------------------------------------- coefficients

    def _tcol(self, t, m: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.broadcast_to(t / self.horizon, (m,)).copy() if t.ndim == 0 else t / self.horizon

    def _vcol(self, V, m: int):
        # networks see V / V0 so the variance input is O(1)
        v = np.full(m, float(V)) if np.isscalar(V) else dk.constant(V)
        return v * (1.0 / self.V0)

    def _seg(self, t) -> int:
        t = np.asarray(t)
        if t.ndim == 0:
            return self.segment_of(float(t))
        if self.n_segments > 1:
            ks = {self.segment_of(float(x)) for x in t}
            if len(ks) > 1:
                raise NotImplementedError("batched evaluation across maturity segments")
            return ks.pop()
        return 0

    def sigma(self, t, S, V) -> Tensor:
        S = dk.constant(S)
        m = S.shape[0]
        cols = [self._tcol(t, m), S * (1.0 / self.S0)]
        if self.two_factor:
            cols.append(self._vcol(V, m))
        out = self.sigma_nets[self._seg(t)](dk.columns(cols))
        return dk.reshape(out, (m,))

    def drift_v(self, t, V) -> Tensor:
        V = dk.constant(V)
        m = V.shape[0]
        out = self.bV_nets[self._seg(t)](dk.columns([self._tcol(t, m), self._vcol(V, m)]))
        return dk.reshape(out, (m,))

    def sigma_v(self, t, V) -> Tensor:
        V = dk.constant(V)
        m = V.shape[0]
        out = self.sigmaV_nets[self._seg(t)](dk.columns([self._tcol(t, m), self._vcol(V, m)]))
        return dk.reshape(out, (m,))

    def zeta(self, t, Y, V) -> tuple[Tensor, Tensor]:
        if self.zeta_net is None:
            raise ValueError("model has no market-price-of-risk network")
        Y = dk.constant(Y)
        m = Y.shape[0]
        cols = [self._tcol(t, m), Y - math.log(self.S0)]
        if self.two_factor:
            cols.append(self._vcol(V, m))
        out = self.zeta_net(dk.columns(cols))
        return dk.take(out, 0, axis=1), dk.take(out, 1, axis=1)

    # ------------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        doc = {
            "r": self.r, "d": self.d, "S0": self.S0, "V0": self.V0, "horizon": self.horizon,
            "rho": self.rho, "rho_trainable": self.rho_trainable,
            "segment_ends": self.segment_ends.tolist(),
            "sigma": [n.to_dict() for n in self.sigma_nets],
        }
        if self.two_factor:
            doc["bV"] = [n.to_dict() for n in self.bV_nets]
            doc["sigmaV"] = [n.to_dict() for n in self.sigmaV_nets]
        if self.zeta_net is not None:
            doc["zeta"] = self.zeta_net.to_dict()
        if self.rho_raw is not None:
            doc["rho_raw"] = float(self.rho_raw.data)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "NeuralSDEModel":
        sig = [Mlp.from_dict(d, name=f"sigma{k}") for k, d in enumerate(doc["sigma"])]
        bv = [Mlp.from_dict(d, name=f"bV{k}") for k, d in enumerate(doc.get("bV", []))]
        sv = [Mlp.from_dict(d, name=f"sigmaV{k}") for k, d in enumerate(doc.get("sigmaV", []))]
        zeta = Mlp.from_dict(doc["zeta"], name="zeta") if "zeta" in doc else None
        model = cls(sig, bv or None, sv or None, zeta, rho=doc["rho"], r=doc["r"], d=doc["d"],
                    S0=doc["S0"], V0=doc["V0"], horizon=doc["horizon"],
                    segment_ends=doc["segment_ends"], rho_trainable=doc.get("rho_trainable", False))
        if model.rho_raw is not None and "rho_raw" in doc:
            model.rho_raw.data[...] = doc["rho_raw"]
        return model


# ----------------------------------------------------------------------- paths


@dataclass(eq=False)
class PathBatch:
    grid: TimeGrid
    Y_nodes: list
    V_nodes: list
    dW1: np.ndarray
    dU: np.ndarray
    rho: float
    measure: str = "Q"
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def M(self) -> int:
        return self.dW1.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.Y_nodes) - 1

    @property
    def Y(self) -> np.ndarray:
        if "Y" not in self._cache:
            self._cache["Y"] = np.stack([dk.constant(y).data for y in self.Y_nodes], axis=1)
        return self._cache["Y"]

    @property
    def S(self) -> np.ndarray:
        if "S" not in self._cache:
            self._cache["S"] = np.exp(self.Y)
        return self._cache["S"]

    @property
    def V(self) -> np.ndarray:
        if "V" not in self._cache:
            m = self.M
            self._cache["V"] = np.stack(
                [np.broadcast_to(dk.constant(v).data, (m,)) for v in self.V_nodes], axis=1)
        return self._cache["V"]

    @property
    def dW2(self) -> np.ndarray:
        return correlate(self.dW1, self.dU, self.rho)

    def S_node(self, n: int) -> Tensor:
        """Differentiable S at step n (exp of the log-price node)."""
        key = ("S_node", n)
        if key not in self._cache:
            self._cache[key] = dk.exp(self.Y_nodes[n])
        return self._cache[key]

    def to_csv(self, path) -> None:
        S, V, t = self.S, self.V, self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "path", "S", "V"])
            for m in range(self.M):
                for n in range(self.n_steps + 1):
                    w.writerow([n, repr(float(t[n])), m, repr(float(S[m, n])), repr(float(V[m, n]))])


def brownian_increments(grid: TimeGrid, M: int, rng: np.random.Generator,
                        n_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Independent N(0, dt_n) increments (dW1, dU), each (M, N), drawn path-major."""
    if M < 1:
        raise ValueError("need at least one path")
    n = grid.n_steps if n_steps is None else n_steps
    z = rng.standard_normal((M, 2, n))
    sq = np.sqrt(grid.dt[:n])
    return z[:, 0, :] * sq, z[:, 1, :] * sq


def correlate(dw1, du, rho):
    """dW2 = rho dW1 + sqrt(1 - rho^2) dU (exact copies at |rho| = 1)."""
    if isinstance(rho, Tensor):
        return rho * dw1 + dk.sqrt(1.0 - dk.square(rho)) * du
    if rho == 1.0:
        return dw1.copy() if isinstance(dw1, np.ndarray) else dw1
    if rho == -1.0:
        return -dw1
    return rho * dw1 + math.sqrt(1.0 - rho * rho) * du


def _check_finite(n: int, *arrays):
    bad = np.zeros(arrays[0].shape, dtype=bool)
    for a in arrays:
        bad |= ~np.isfinite(np.broadcast_to(a, bad.shape))
    if bad.any():
        raise SimulationError("non-finite state", n, np.flatnonzero(bad))


def p_drifts(model: NeuralSDEModel, t, Y, V, sig: Tensor | None = None,
             sv: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """Historical-measure drifts of (Y, V).

    b^{Y,P} = r - d - sigma^2/2 + sigma^2 zeta1 + rho sigma sigmaV zeta2
    b^{V,P} = bV + rho sigma sigmaV zeta1 + sigmaV^2 zeta2

    For a one-factor model the variance terms vanish and b^{V,P} is None.
    """
    if model.zeta_net is None:
        raise ValueError("p_drifts needs a market-price-of-risk network")
    Y = dk.constant(Y)
    S = dk.exp(Y)
    if sig is None:
        sig = model.sigma(t, S, V)
    z1, z2 = model.zeta(t, Y, V)
    sig2 = dk.square(sig)
    base = (model.r - model.d) - 0.5 * sig2
    if not model.two_factor:
        return base + sig2 * z1, None
    rho = model.rho_value()
    if sv is None:
        sv = model.sigma_v(t, V)
    cross = rho * sig * sv
    b_y = base + sig2 * z1 + cross * z2
    b_v = model.drift_v(t, V) + cross * z1 + dk.square(sv) * z2
    return b_y, b_v


def _initial(model, M, S0, V0):
    S0 = model.S0 if S0 is None else float(S0)
    V0 = model.V0 if V0 is None else float(V0)
    if not S0 > 0:
        raise ValueError("S0 must be positive")
    return S0, V0


def simulate_q(model: NeuralSDEModel, grid: TimeGrid, M: int | None = None, S0: float | None = None,
               V0: float | None = None, rng: np.random.Generator | None = None,
               increments: tuple[np.ndarray, np.ndarray] | None = None,
               n_steps: int | None = None) -> PathBatch:
    """Euler-Maruyama in log coordinates under the pricing measure.

    Differentiable with respect to any model tensor that requires grad (unless
    called inside :class:`diffkit.no_grad`).
    """
    if increments is None:
        if M is None or rng is None:
            raise ValueError("give either increments or (M, rng)")
        increments = brownian_increments(grid, M, rng, n_steps)
    dw1, du = increments
    M = dw1.shape[0]
    N = dw1.shape[1] if n_steps is None else n_steps
    S0, V0 = _initial(model, M, S0, V0)
    rho = model.rho_value()
    dw2 = correlate(dw1, du, rho) if model.two_factor else None
    mu0 = model.r - model.d
    Y = Tensor(np.full(M, math.log(S0)))
    V = Tensor(np.full(M, V0))
    S = Tensor(np.full(M, S0))
    ys, vs = [Y], [V]
    t, dt = grid.times, grid.dt
    for n in range(N):
        sig = model.sigma(t[n], S, V)
        drift = mu0 - 0.5 * dk.square(sig)
        if model.two_factor:
            bv = model.drift_v(t[n], V)
            sv = model.sigma_v(t[n], V)
            dw2n = dk.take(dw2, n, axis=1) if isinstance(dw2, Tensor) else dw2[:, n]
            V = V + bv * dt[n] + sv * dw2n
        Y = Y + drift * dt[n] + sig * dw1[:, n]
        S = dk.exp(Y)
        _check_finite(n + 1, Y.data, V.data)
        ys.append(Y)
        vs.append(V)
    return PathBatch(grid, ys, vs, dw1, du, model.rho, "Q")


def simulate_p(model: NeuralSDEModel, grid: TimeGrid, M: int | None = None, Y0: float | None = None,
               V0: float | None = None, rng: np.random.Generator | None = None,
               increments: tuple[np.ndarray, np.ndarray] | None = None,
               n_steps: int | None = None) -> PathBatch:
    """Euler-Maruyama under the historical measure (drifts from :func:`p_drifts`).

    The diffusion coefficients and correlation are those of the pricing
    measure; with the same increments and zeta == 0 the paths coincide
    bitwise with :func:`simulate_q`.
    """
    if model.zeta_net is None:
        raise ValueError("simulate_p needs a market-price-of-risk network")
    if increments is None:
        if M is None or rng is None:
            raise ValueError("give either increments or (M, rng)")
        increments = brownian_increments(grid, M, rng, n_steps)
    dw1, du = increments
    M = dw1.shape[0]
    N = dw1.shape[1] if n_steps is None else n_steps
    y0 = math.log(model.S0) if Y0 is None else float(Y0)
    V0 = model.V0 if V0 is None else float(V0)
    rho = model.rho_value()
    dw2 = correlate(dw1, du, rho) if model.two_factor else None
    Y = Tensor(np.full(M, y0))
    V = Tensor(np.full(M, V0))
    S = Tensor(np.full(M, model.S0 if Y0 is None else math.exp(y0)))
    ys, vs = [Y], [V]
    t, dt = grid.times, grid.dt
    for n in range(N):
        sig = model.sigma(t[n], S, V)
        sv = model.sigma_v(t[n], V) if model.two_factor else None
        b_y, b_v = p_drifts(model, t[n], Y, V, sig=sig, sv=sv)
        if model.two_factor:
            dw2n = dk.take(dw2, n, axis=1) if isinstance(dw2, Tensor) else dw2[:, n]
            V = V + b_v * dt[n] + sv * dw2n
        Y = Y + b_y * dt[n] + sig * dw1[:, n]
        S = dk.exp(Y)
        _check_finite(n + 1, Y.data, V.data)
        ys.append(Y)
        vs.append(V)
    return PathBatch(grid, ys, vs, dw1, du, model.rho, "P")
