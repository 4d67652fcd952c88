"""Feedforward networks, Glorot-normal initialisation and the Adam / SGLD updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor

log = logging.getLogger(__name__)

_ACTIVATIONS = {"identity", "softplus", "tanh"}


def glorot_sigma(fan_in: int, fan_out: int, gain: float = 1.5) -> float:
    """Standard deviation g * sqrt(2 / (fan_in + fan_out)).

    Used both for initialisation and as the per-weight prior scale.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    return gain * math.sqrt(2.0 / (fan_in + fan_out))


class Mlp:
    """Dense network with tanh hidden layers.

    Parameters
    ----------
    widths : sequence of int
        Layer widths ``(input, hidden..., output)``.
    output_activation : {"identity", "softplus"}
        Softplus keeps the output strictly positive.
    """

    def __init__(self, widths: Sequence[int], output_activation: str = "identity",
                 hidden_activation: str = "tanh", name: str = "mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if output_activation not in _ACTIVATIONS or hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {output_activation!r}/{hidden_activation!r}")
        self.widths = widths
        self.output_activation = output_activation
        self.hidden_activation = hidden_activation
        self.name = name
        self.weights = [Tensor(np.zeros((a, b)), requires_grad=True, name=f"{name}.W{i}")
                        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.biases = [Tensor(np.zeros(b), requires_grad=True, name=f"{name}.b{i}")
                       for i, b in enumerate(widths[1:])]

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def layer_sigmas(self, gain: float) -> list[float]:
        """Glorot scale per parameter tensor (biases share their layer's scale)."""
        out = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            s = glorot_sigma(a, b, gain)
            out += [s, s]
        return out

    def requires_grad_(self, flag: bool) -> "Mlp":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    @staticmethod
    def _act(kind: str, x: Tensor) -> Tensor:
        if kind == "tanh":
            return dk.tanh(x)
        if kind == "softplus":
            return dk.softplus(x)
        return x

    def __call__(self, x) -> Tensor:
        h = dk.constant(x)
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise dk.ShapeError(f"{self.name}: expected input (M, {self.n_in}), got {h.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dk.affine(h, w, b)
            h = self._act(self.output_activation if i == last else self.hidden_activation, h)
        return h

    def copy(self) -> "Mlp":
        return Mlp.from_dict(self.to_dict(), name=self.name)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"rows": int(w.shape[0]), "cols": int(w.shape[1]),
                 "weights": w.data.ravel().tolist(), "biases": b.data.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, doc: dict, name: str = "mlp") -> "Mlp":
        layers = doc["layers"]
        widths = [layers[0]["rows"]] + [layer["cols"] for layer in layers]
        for a, b in zip(layers[:-1], layers[1:]):
            if a["cols"] != b["rows"]:
                raise ValueError(f"incompatible consecutive layers {a['cols']} -> {b['rows']}")
        net = cls(widths, doc.get("output_activation", "identity"),
                  doc.get("hidden_activation", "tanh"), name=name)
        for w, b, layer in zip(net.weights, net.biases, layers):
            w.data[...] = np.asarray(layer["weights"], dtype=np.float64).reshape(w.shape)
            b.data[...] = np.asarray(layer["biases"], dtype=np.float64)
        return net

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, name: str = "mlp") -> "Mlp":
        return cls.from_dict(json.loads(text), name=name)


def init_glorot(net: Mlp, gain: float, rng: np.random.Generator) -> None:
    """Weights ~ N(0, glorot_sigma^2) per layer, biases exactly zero."""
    for w, b in zip(net.weights, net.biases):
        s = glorot_sigma(w.shape[0], w.shape[1], gain)
        w.data[...] = rng.normal(0.0, s, size=w.shape)
        b.data[...] = 0.0


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update (minimisation)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or '?'}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------------- SGLD


@dataclass
class SgldConfig:
    """Langevin step size and noise switch.

    ``decay`` multiplies the step size after every applied step (1.0 keeps it
    constant). ``stream`` names the RNG sub-stream that feeds the noise.
    """

    step_size: float
    noise: bool = True
    decay: float = 1.0
    stream: str = "sgld"
    skipped: int = 0

    def __post_init__(self):
        if self.noise and not self.step_size > 0:
            raise ValueError("step_size must be positive when noise is enabled")


def sgld_step(params: Sequence[Tensor], grad_log_post: Sequence[np.ndarray], cfg: SgldConfig,
              rng: np.random.Generator) -> bool:
    """theta += (eps/2) * grad log posterior + N(0, eps).

    Returns False (and halves ``cfg.step_size``) when a gradient is non-finite;
    the parameters are then left untouched.
    """
    if not all(np.isfinite(g).all() for g in grad_log_post):
        cfg.step_size *= 0.5
        cfg.skipped += 1
        log.warning("non-finite log-posterior gradient: step skipped, step size halved to %.3g",
                    cfg.step_size)
        return False
    eps = cfg.step_size
    for p, g in zip(params, grad_log_post):
        delta = 0.5 * eps * g
        if cfg.noise:
            delta = delta + rng.normal(0.0, math.sqrt(eps), size=p.shape)
        p.data += delta
    cfg.step_size *= cfg.decay
    return True
