"""Experiment configuration: TOML files, named presets, validation and hashing.

A configuration is a nested table. It is built by merging, in order, the
built-in defaults, an optional named preset (``preset = "..."``), the
``scale`` overrides and finally the user's own keys. Unknown keys anywhere are
rejected. See ``README.md`` for the full schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "PRESETS", "load_config", "load_preset", "build_config", "config_hash",
           "DEFAULTS", "SCALES"]

PRESETS = ("bs-paper", "heston-paper", "rbergomi-paper", "snp-1990s")
MODES = ("options_only", "joint", "staged")
SOURCES = ("bs", "heston", "rbergomi", "table", "csv")


class ConfigError(ValueError):
    pass


_F = (int, float)
_LIST = list

# section -> key -> accepted python types (dict means a nested section)
SCHEMA: dict[str, Any] = {
    "preset": str, "mode": str, "scale": str, "seed": int,
    "model": {"factors": int, "hidden": _LIST, "with_zeta": bool, "rho": _F,
              "rho_trainable": bool, "V0": _F, "gain": _F},
    "grid": {"T": _F, "n_steps": int},
    "data": {
        "source": str, "S0": _F, "r": _F, "d": _F,
        "strike_ratios": _LIST, "strike_ratios_linspace": _LIST, "log_strikes_linspace": _LIST,
        "maturities": _LIST, "maturity_steps": _LIST, "maturity_step_base": int,
        "timeseries": bool, "ts_n_steps": int,
        "target_M": int, "target_refine": int, "target_n_steps": int,
        "options_csv": str, "timeseries_csv": str,
        "bs": {"sigma": _F, "mu": _F},
        "heston": {"kappa_bar": _F, "theta_bar": _F, "volvol": _F, "V0": _F, "rho": _F,
                   "lam": _F, "mu": _F},
        "rbergomi": {"a": _F, "eta": _F, "xi": _F, "rho": _F},
        "table": {"maturities": _LIST, "strike_ratios": _LIST, "prices": _LIST},
    },
    "hyper": {"step_size": _F, "epochs": int, "M": int, "sigma_prior": _F,
              "segment_sigma_priors": _LIST, "delta": _F, "delta2": _F, "noise": bool,
              "step_decay": _F, "burn_in": int, "hedge_lr": _F, "hedge_steps": int,
              "hedge_hidden": _LIST},
    "bands": {"q_lo": _F, "q_hi": _F, "lookback_maturities": _LIST},
    "outputs": {"dir": str, "snapshot_every": int},
    "sweep": {"sigma_prior": _LIST, "delta": _LIST},
}

DEFAULTS: dict[str, Any] = {
    "mode": "options_only",
    "scale": "desk",
    "seed": 0,
    "model": {"factors": 2, "hidden": [32, 32], "with_zeta": False, "rho": 0.0,
              "rho_trainable": False, "V0": 0.04, "gain": 1.5},
    "grid": {"T": 1.0, "n_steps": 48},
    "data": {"S0": 1.0, "r": 0.0, "d": 0.0, "timeseries": False, "target_M": 100_000,
             "target_refine": 10, "target_n_steps": 96},
    "hyper": {"step_size": 1e-7, "epochs": 200, "M": 1000, "noise": True, "step_decay": 1.0,
              "burn_in": 50, "hedge_lr": 1e-3, "hedge_steps": 1, "hedge_hidden": [32, 32]},
    "bands": {"q_lo": 0.1, "q_hi": 0.9, "lookback_maturities": []},
    "outputs": {"dir": "runs/out"},
}

SCALES = {
    "desk": {},
    "paper": {"model": {"hidden": [100, 100, 100, 100]}, "grid": {"n_steps": 96},
              "hyper": {"M": 5000, "hedge_hidden": [100, 100, 100, 100]}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(doc: dict, schema: dict, where: str = "") -> None:
    for k, v in doc.items():
        path = f"{where}{k}"
        if k not in schema:
            raise ConfigError(f"unknown key {path!r}")
        spec = schema[k]
        if isinstance(spec, dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be a table")
            _check_keys(v, spec, path + ".")
        else:
            ok = isinstance(v, spec) and not (spec in (int, _F) and isinstance(v, bool))
            if not ok:
                raise ConfigError(f"{path!r} has the wrong type ({type(v).__name__})")


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(PRESETS)}")
    text = resources.files("nsdecal").joinpath("presets", f"{name}.toml").read_text()
    return tomllib.loads(text)


def build_config(user: dict | None = None, preset: str | None = None) -> dict:
    """Merge defaults, preset, scale and user keys, then validate."""
    user = copy.deepcopy(user or {})
    _check_keys(user, SCHEMA)
    name = preset or user.pop("preset", None)
    user.pop("preset", None)
    base = copy.deepcopy(DEFAULTS)
    pre = {}
    if name is not None:
        pre = load_preset(name)
        _check_keys(pre, SCHEMA)
        base = _merge(base, pre)
    scale = user.get("scale", base.get("scale", "desk"))
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {sorted(SCALES)}")
    cfg = _merge(_merge(base, SCALES[scale]), user)
    if name is not None:
        cfg["preset"] = name
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> dict:
    user: dict = {}
    if path is not None:
        p = Path(path)
        try:
            user = tomllib.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        data = user.get("data", {})
        for key in ("options_csv", "timeseries_csv"):
            if key in data and not Path(data[key]).is_absolute():
                data[key] = str((p.parent / data[key]).resolve())
    if overrides:
        user = _merge(user, overrides)
    return build_config(user, preset)


def _validate(cfg: dict) -> None:
    mode = cfg["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    m, g, d, h, b = cfg["model"], cfg["grid"], cfg["data"], cfg["hyper"], cfg["bands"]
    if m["factors"] not in (1, 2):
        raise ConfigError("model.factors must be 1 or 2")
    if not m["hidden"] or any(not isinstance(w, int) or w < 1 for w in m["hidden"]):
        raise ConfigError("model.hidden must list positive integer widths")
    if not -1.0 <= m["rho"] <= 1.0:
        raise ConfigError("model.rho must lie in [-1, 1]")
    if g["T"] <= 0 or g["n_steps"] < 1:
        raise ConfigError("grid.T must be positive and grid.n_steps >= 1")
    if cfg["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    src = d.get("source")
    if src not in SOURCES:
        raise ConfigError(f"data.source must be one of {SOURCES}")
    if src == "csv":
        if "options_csv" not in d:
            raise ConfigError("data.source = 'csv' needs data.options_csv")
        for key in ("options_csv", "timeseries_csv"):
            if key in d and not Path(d[key]).exists():
                raise ConfigError(f"data.{key} does not exist: {d[key]}")
    elif src != "table":
        sect = {"bs": "bs", "heston": "heston", "rbergomi": "rbergomi"}[src]
        if sect not in d:
            raise ConfigError(f"data.source = {src!r} needs a [data.{sect}] section")
    if src == "table" and "table" not in d:
        raise ConfigError("data.source = 'table' needs a [data.table] section")
    if mode == "joint":
        if not (d.get("timeseries") or "timeseries_csv" in d):
            raise ConfigError("mode 'joint' needs a time-series source")
        if not m["with_zeta"]:
            raise ConfigError("mode 'joint' needs model.with_zeta = true")
        if src in ("rbergomi", "table"):
            raise ConfigError(f"no time-series generator for data.source = {src!r}")
    if mode == "staged" and m["rho_trainable"]:
        raise ConfigError("staged mode keeps rho fixed")
    if "delta" in h and "delta2" in h:
        raise ConfigError("give hyper.delta or hyper.delta2, not both")
    for key in ("step_size", "sigma_prior", "delta", "delta2", "hedge_lr"):
        if key in h and not h[key] > 0:
            raise ConfigError(f"hyper.{key} must be positive")
    if h["M"] < 2 or h["epochs"] < 0 or h["burn_in"] < 0:
        raise ConfigError("hyper.M must be >= 2, epochs and burn_in >= 0")
    if not 0.0 <= b["q_lo"] <= b["q_hi"] <= 1.0:
        raise ConfigError("bands need 0 <= q_lo <= q_hi <= 1")
    sweep = cfg.get("sweep", {})
    for key, vals in sweep.items():
        if not vals or any(not isinstance(v, _F) or not v > 0 for v in vals):
            raise ConfigError(f"sweep.{key} must be a non-empty list of positive numbers")


def config_hash(cfg: dict) -> str:
    """SHA-256 over the canonical JSON of every field except the output location."""
    sem = {k: v for k, v in cfg.items() if k != "outputs"}
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
