"""Closed-form bounds for approximating an SDE by a neural SDE.

``uat_bounds`` gives the minimal admissible localisation radius and hidden
width for a target accuracy eps; ``barron_bound`` is the one-hidden-layer
approximation error 8 (r C)^2 / p for Barron functions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

__all__ = ["UatInputs", "UatResult", "uat_bounds", "barron_bound", "coefficient_budget_ok"]


@dataclass(frozen=True)
class UatInputs:
    T: float
    C: float
    L: float
    k1r: float
    k2r: float
    X0_norm: float
    eps: float
    K: float

    def __post_init__(self):
        for name in ("T", "C", "L", "K"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("k1r", "k2r", "X0_norm"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.eps <= 1.0:
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")


@dataclass(frozen=True)
class UatResult:
    beta: float
    r_min: float
    p_min: int
    barron_err: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def uat_bounds(inp: UatInputs) -> UatResult:
    """beta = 54 K^2 T (T^2 + (32/3)^2); r_min = sqrt(8 (1 + 27 |X0|^4) e^{beta T} / eps);
    p_min = ceil(r^2 C^2 (256 T + 64 T^2) / eps * exp(16 k2r T + 4 k1r T^2)).

    Overflow to infinity raises OverflowError instead of returning inf.
    """
    T, eps = inp.T, inp.eps
    beta = 54.0 * inp.K ** 2 * T * (T ** 2 + (32.0 / 3.0) ** 2)
    r2 = 8.0 * (1.0 + 27.0 * inp.X0_norm ** 4) * math.exp(beta * T) / eps
    r_min = math.sqrt(r2)
    p_real = r2 * inp.C ** 2 * (256.0 * T + 64.0 * T ** 2) / eps \
        * math.exp(16.0 * inp.k2r * T + 4.0 * inp.k1r * T ** 2)
    if not math.isfinite(p_real):
        raise OverflowError("p_min exceeds floating-point range")
    p_min = max(1, math.ceil(p_real))
    return UatResult(beta, r_min, p_min, barron_bound(r_min, inp.C, p_min))


def barron_bound(r: float, C: float, p: float) -> float:
    """8 (r C)^2 / p."""
    if not r > 0 or not C > 0:
        raise ValueError("r and C must be positive")
    if not p >= 1:
        raise ValueError("p must be >= 1")
    return 8.0 * (r * C) ** 2 / p


def coefficient_budget_ok(coefficients, r: float, C: float) -> bool:
    """Whether output-layer weights satisfy sum |c_k| <= 2 r C."""
    return sum(abs(c) for c in coefficients) <= 2.0 * r * C
