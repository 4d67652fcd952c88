"""Chains of per-epoch draws, quantiles and credible bands."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels

__all__ = ["Chain", "BandSummary", "quantile", "band", "trace_export", "trace_import",
           "detect_burn_in", "MIN_DRAWS"]

MIN_DRAWS = 10


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


class Chain:
    """Epoch-indexed table of named scalar series.

    Every row carries an ``epoch`` (counted within its stage) and a ``stage``;
    missing values are stored as NaN.
    """

    def __init__(self, names: Sequence[str]):
        names = list(names)
        if len(set(names)) != len(names) or {"epoch", "stage"} & set(names):
            raise ValueError("series names must be unique and not 'epoch'/'stage'")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}
        self._epochs: list[int] = []
        self._stages: list[int] = []
        self._rows: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, epoch: int, values: Mapping[str, float] | Sequence[float], stage: int = 0) -> None:
        row = np.full(len(self.names), np.nan)
        if isinstance(values, Mapping):
            for k, v in values.items():
                if k not in self._index:
                    raise KeyError(f"unknown series {k!r}")
                row[self._index[k]] = v
        else:
            vals = np.asarray(values, dtype=np.float64)
            if vals.shape != row.shape:
                raise ValueError(f"expected {row.size} values, got {vals.size}")
            row[:] = vals
        self._epochs.append(int(epoch))
        self._stages.append(int(stage))
        self._rows.append(row)

    @property
    def epochs(self) -> np.ndarray:
        return np.asarray(self._epochs, dtype=np.int64)

    @property
    def stages(self) -> np.ndarray:
        return np.asarray(self._stages, dtype=np.int64)

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        cols = [self._index[n] for n in (names or self.names)]
        if not self._rows:
            return np.empty((0, len(cols)))
        return np.vstack(self._rows)[:, cols]

    def series(self, name: str) -> np.ndarray:
        return self.matrix([name])[:, 0]

    def after_burn_in(self, burn_in: int) -> np.ndarray:
        """Row mask of draws whose within-stage epoch is >= burn_in."""
        return self.epochs >= burn_in

    def with_columns(self, extra: Mapping[str, np.ndarray]) -> "Chain":
        out = Chain(self.names + list(extra))
        cols = np.column_stack([np.asarray(v, dtype=np.float64) for v in extra.values()]) \
            if extra else np.empty((len(self), 0))
        base = self.matrix()
        for i in range(len(self)):
            out.append(self._epochs[i], np.concatenate([base[i], cols[i]]), self._stages[i])
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chain):
            return NotImplemented
        return (self.names == other.names and self._epochs == other._epochs
                and self._stages == other._stages
                and np.array_equal(self.matrix(), other.matrix(), equal_nan=True))


def quantile(series, q: float) -> float:
    """Order-statistic quantile, linear interpolation at h = (n - 1) q (0-based).

    NaNs are ignored. q = 0 and q = 1 give the minimum and maximum.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("quantile of an empty series")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {q}")
    return float(kernels.column_quantiles(x, [q])[0, 0])


@dataclass
class BandSummary:
    names: list
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    q_lo: float
    q_hi: float
    n_draws: np.ndarray
    cells: list = field(default_factory=list)   # (maturity, strike) per name

    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return (self.lower <= v) & (v <= self.upper)

    def to_csv(self, path) -> None:
        if len(self.cells) != len(self.names):
            raise ValueError("band cells (maturity, strike) are required for CSV export")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["maturity", "strike", "lower", "median", "upper"])
            for (t, k), lo, md, hi in zip(self.cells, self.lower, self.median, self.upper):
                w.writerow([_fmt(t), _fmt(k), _fmt(lo), _fmt(md), _fmt(hi)])


def band(chain: Chain, names: Sequence[str], burn_in: int = 0, q_lo: float = 0.10,
         q_hi: float = 0.90, cells: Sequence[tuple] | None = None,
         min_draws: int = MIN_DRAWS) -> BandSummary:
    """Per-series quantile band over post-burn-in draws (NaN draws dropped)."""
    if not 0.0 <= q_lo <= q_hi <= 1.0:
        raise ValueError("need 0 <= q_lo <= q_hi <= 1")
    if len(chain) and burn_in >= int(chain.epochs.max()) + 1:
        raise ValueError("burn-in is not shorter than the chain")
    x = chain.matrix(list(names))[chain.after_burn_in(burn_in)]
    counts = np.sum(~np.isnan(x), axis=0)
    if x.shape[0] == 0 or counts.min() < min_draws:
        raise ValueError(f"fewer than {min_draws} draws remain after burn-in {burn_in}")
    qs = kernels.column_quantiles(x, [q_lo, 0.5, q_hi])
    return BandSummary(list(names), qs[0], qs[1], qs[2], q_lo, q_hi, counts,
                       list(cells) if cells is not None else [])


def trace_export(chain: Chain, path) -> None:
    """CSV with header epoch,stage,<series>; values written with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "stage", *chain.names])
        for e, s, row in zip(chain._epochs, chain._stages, chain._rows):
            w.writerow([e, s, *(_fmt(v) for v in row)])


def trace_import(path) -> Chain:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["epoch", "stage"]:
            raise ValueError(f"{path}: not a trace file (header {header[:2]})")
        chain = Chain(header[2:])
        for row in r:
            chain.append(int(row[0]), [float(v) for v in row[2:]], int(row[1]))
    return chain


def detect_burn_in(g_series, window: int = 20, rel_change: float = 0.05) -> int | None:
    """First epoch after which the trailing-window mean of G moves by < rel_change.

    Compares the mean over epochs (e-w, e] with the mean over the preceding
    window; returns None if that never happens.
    """
    g = np.asarray(g_series, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if g.size < 2 * window:
        return None
    c = np.concatenate([[0.0], np.cumsum(g)])
    for e in range(2 * window - 1, g.size):
        cur = (c[e + 1] - c[e + 1 - window]) / window
        prev = (c[e + 1 - window] - c[e + 1 - 2 * window]) / window
        if math.isfinite(cur) and abs(cur - prev) < rel_change * abs(prev):
            return e
    return None
