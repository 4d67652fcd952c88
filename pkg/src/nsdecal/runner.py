"""Orchestration behind the command-line subcommands.

Every run directory has the layout::

    data/                 generated or copied market data (never written by calibration)
    trace.csv             one row per epoch
    bands_prices.csv      credible bands of model call prices
    bands_iv.csv          credible bands of implied volatilities
    bands_lookback.csv    bands of floating lookback put prices (if configured)
    snapshots/            network snapshots (JSON)
    config.json           fully merged configuration
    manifest.json         hash, seed, versions, file list, wall-clock
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import refmodels as rm
from .bayes import Calibrator, HyperParams, OptionDataset, TimeSeriesDataset, algorithm2_run
from .config import config_hash
from .nets import Mlp
from .posterior import Chain, band, trace_export, trace_import
from .pricing import HedgeNet, OptionSpec, implied_vol, mc_price_cv, mc_prices
from .sde import NeuralSDEModel, TimeGrid, simulate_q
from .streams import stream
from . import diffkit as dk

log = logging.getLogger(__name__)

__all__ = ["MarketData", "generate", "calibrate", "sweep", "price_from_snapshots",
           "surface_from_trace", "build_model", "write_manifest"]


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


# ------------------------------------------------------------------------ data


@dataclass
class MarketData:
    options: OptionDataset
    timeseries: TimeSeriesDataset | None
    stderr: np.ndarray
    implied_vols: np.ndarray
    maturity_text: list = field(default_factory=list)
    strike_text: list = field(default_factory=list)
    price_text: list = field(default_factory=list)
    params: dict = field(default_factory=dict)


def _linspace(spec) -> np.ndarray:
    a, b, n = spec
    return np.linspace(float(a), float(b), int(n))


def _maturities(cfg) -> np.ndarray:
    d, T = cfg["data"], cfg["grid"]["T"]
    if "maturities" in d:
        return np.asarray(d["maturities"], dtype=np.float64)
    if "maturity_steps" in d:
        base = d.get("maturity_step_base", cfg["grid"]["n_steps"])
        return np.asarray(d["maturity_steps"], dtype=np.float64) / base * T
    raise ValueError("no maturities configured (data.maturities or data.maturity_steps)")


def _strike_ratios(cfg) -> np.ndarray:
    d = cfg["data"]
    if "strike_ratios" in d:
        return np.asarray(d["strike_ratios"], dtype=np.float64)
    if "strike_ratios_linspace" in d:
        return _linspace(d["strike_ratios_linspace"])
    if "log_strikes_linspace" in d:
        return np.exp(_linspace(d["log_strikes_linspace"]))
    raise ValueError("no strikes configured")


def _ivs(prices, S0, K, T, r, d) -> np.ndarray:
    return np.asarray(implied_vol(prices, S0, K, T, r, d, errors="nan"), dtype=np.float64)


def _heston_params(cfg) -> rm.HestonParams:
    h, d = cfg["data"]["heston"], cfg["data"]
    return rm.HestonParams.from_q(h["kappa_bar"], h["theta_bar"], h["volvol"], h["V0"], h["rho"],
                                  d["r"], lam=h.get("lam", 0.0), mu=h.get("mu"), d=d["d"], S0=d["S0"])


def make_market_data(cfg) -> MarketData:
    """Build (or load) the market data described by ``cfg['data']``."""
    d = cfg["data"]
    seed = cfg["seed"]
    src = d["source"]
    S0, r, q = float(d["S0"]), float(d["r"]), float(d["d"])
    T = cfg["grid"]["T"]
    ts = None
    params: dict = {"source": src, "S0": S0, "r": r, "d": q, "seed": seed}

    if src == "table":
        tab = d["table"]
        mats_txt = list(tab["maturities"])
        ratios_txt = list(tab["strike_ratios"])
        rows = tab["prices"]
        if len(rows) != len(mats_txt) or any(len(row) != len(ratios_txt) for row in rows):
            raise ValueError("data.table.prices must be maturities x strike_ratios")
        mat_t, k_t, p_t = [], [], []
        for mt, row in zip(mats_txt, rows):
            for rt, pt in zip(ratios_txt, row):
                mat_t.append(str(mt))
                k_t.append(repr(round(float(rt) * S0, 10)))
                p_t.append(str(pt))
        mats = np.array([float(x) for x in mat_t])
        strikes = np.array([float(x) for x in k_t])
        prices = np.array([float(x) for x in p_t])
        opts = OptionDataset(strikes, mats, prices, S0)
        return MarketData(opts, None, np.zeros(prices.size), _ivs(prices, S0, strikes, mats, r, q),
                          mat_t, k_t, p_t, params)

    if src == "csv":
        return load_market_csv(d["options_csv"], d.get("timeseries_csv"), S0, params)

    mats = _maturities(cfg)
    ratios = _strike_ratios(cfg)
    KK, TT = np.meshgrid(ratios * S0, mats)
    strikes, mat_col = KK.ravel(), TT.ravel()
    ts_grid = TimeGrid.uniform(T, d.get("ts_n_steps", cfg["grid"]["n_steps"]))

    if src == "bs":
        p = rm.BSParams(S0=S0, sigma=d["bs"]["sigma"], r=r, d=q, mu=d["bs"]["mu"])
        params.update(sigma=p.sigma, mu=p.mu)
        prices = np.asarray(rm.bs_call(S0, strikes, mat_col, p.sigma, r, q))
        err = np.zeros(prices.size)
        if d.get("timeseries"):
            y = rm.bs_simulate(p, ts_grid, 1, stream(seed, "data", 1))[0]
            ts = TimeSeriesDataset(ts_grid.times, y)
    elif src == "heston":
        p = _heston_params(cfg)
        params.update(kappa=p.kappa, theta=p.theta, kappa_bar=p.kappa_bar, theta_bar=p.theta_bar,
                      volvol=p.volvol, V0=p.V0, rho=p.rho, lam=p.lam, mu=p.mu,
                      target_M=d["target_M"], target_refine=d["target_refine"])
        pr, er = rm.heston_target_prices(p, ratios * S0, mats, d["target_M"], stream(seed, "data", 0),
                                         n_steps=d["target_n_steps"], refine=d["target_refine"])
        prices, err = pr.ravel(), er.ravel()
        if d.get("timeseries"):
            hp = rm.heston_simulate(p, ts_grid, 1, stream(seed, "data", 1), "P", d["target_refine"])
            ts = TimeSeriesDataset(ts_grid.times, hp.Y[0], hp.V[0])
    elif src == "rbergomi":
        b = d["rbergomi"]
        p = rm.RBergomiParams(a=b["a"], eta=b["eta"], xi=b["xi"], rho=b["rho"], S0=S0, r=r)
        params.update(a=p.a, eta=p.eta, xi=p.xi, rho=p.rho, target_M=d["target_M"])
        pr, er, _ = rm.rbergomi_target_surface(p, np.log(ratios), mats, d["target_M"],
                                               stream(seed, "data", 0), n_steps=d["target_n_steps"],
                                               horizon=T)
        prices, err = pr.ravel(), er.ravel()
    else:  # pragma: no cover - validated by config
        raise ValueError(src)
    opts = OptionDataset(strikes, mat_col, prices, S0)
    return MarketData(opts, ts, err, _ivs(prices, S0, strikes, mat_col, r, q), params=params)


def write_market_data(md: MarketData, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = []
    o = md.options
    path = out / "options.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity", "strike", "price", "stderr", "implied_vol"])
        for i in range(o.J):
            w.writerow([
                md.maturity_text[i] if md.maturity_text else _fmt(o.maturities[i]),
                md.strike_text[i] if md.strike_text else _fmt(o.strikes[i]),
                md.price_text[i] if md.price_text else _fmt(o.prices[i]),
                _fmt(md.stderr[i]), _fmt(md.implied_vols[i]),
            ])
    files.append(path)
    if md.timeseries is not None:
        path = out / "timeseries.csv"
        ts = md.timeseries
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "time", "Y", "V"])
            for n in range(ts.times.size):
                v = ts.V[n] if ts.V is not None else float("nan")
                w.writerow([n, _fmt(ts.times[n]), _fmt(ts.Y[n]), _fmt(v)])
        files.append(path)
    path = out / "params.json"
    path.write_text(json.dumps(md.params, indent=2, sort_keys=True) + "\n")
    files.append(path)
    return files


def load_market_csv(options_csv, timeseries_csv, S0: float, params: dict | None = None) -> MarketData:
    with open(options_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"maturity", "strike", "price"}
    if not rows or not need <= set(rows[0]):
        raise ValueError(f"{options_csv}: expected columns {sorted(need)}")
    mats = np.array([float(r["maturity"]) for r in rows])
    strikes = np.array([float(r["strike"]) for r in rows])
    prices = np.array([float(r["price"]) for r in rows])
    err = np.array([float(r.get("stderr") or 0.0) for r in rows])
    ivs = np.array([float(r.get("implied_vol") or "nan") for r in rows])
    if "bid" in rows[0] and "ask" in rows[0]:
        bid = np.array([float(r["bid"]) for r in rows])
        ask = np.array([float(r["ask"]) for r in rows])
        opts = OptionDataset.from_quotes(strikes, mats, bid, ask, S0)
    else:
        opts = OptionDataset(strikes, mats, prices, S0)
    ts = None
    if timeseries_csv:
        with open(timeseries_csv, newline="") as fh:
            trows = list(csv.DictReader(fh))
        t = np.array([float(r["time"]) for r in trows])
        y = np.array([float(r["Y"]) for r in trows])
        v = np.array([float(r.get("V") or "nan") for r in trows])
        ts = TimeSeriesDataset(t, y, None if np.isnan(v).all() else v)
    return MarketData(opts, ts, err, ivs, params=dict(params or {}))


def generate(cfg: dict, out_dir) -> list[Path]:
    md = make_market_data(cfg)
    return write_market_data(md, Path(out_dir))


# --------------------------------------------------------------------- models


def _delta(h: dict) -> float | None:
    if "delta" in h:
        return float(h["delta"])
    if "delta2" in h:
        return math.sqrt(float(h["delta2"]))
    return None


def hyper_from_config(cfg: dict) -> HyperParams:
    h = cfg["hyper"]
    return HyperParams(step_size=h["step_size"], epochs=h["epochs"], M=h["M"],
                       sigma_prior=h.get("sigma_prior"), segment_sigma_priors=h.get("segment_sigma_priors"),
                       delta=_delta(h), gain=cfg["model"]["gain"], noise=h["noise"],
                       step_decay=h["step_decay"], burn_in=h["burn_in"], seed=cfg["seed"],
                       hedge_lr=h["hedge_lr"], hedge_steps=h["hedge_steps"],
                       hedge_hidden=tuple(h["hedge_hidden"]))


def build_model(cfg: dict, segment_ends=None) -> NeuralSDEModel:
    m, d = cfg["model"], cfg["data"]
    n_seg = 1 if segment_ends is None else len(segment_ends)
    return NeuralSDEModel.build(
        hidden=m["hidden"], factors=m["factors"], with_zeta=m["with_zeta"], n_segments=n_seg,
        segment_ends=segment_ends, rho=m["rho"], r=d["r"], d=d["d"], S0=d["S0"], V0=m["V0"],
        horizon=cfg["grid"]["T"], gain=m["gain"], rng=stream(cfg["seed"], "init"),
        rho_trainable=m["rho_trainable"])


def make_grid(cfg: dict, maturities) -> TimeGrid:
    return TimeGrid.including(cfg["grid"]["T"], cfg["grid"]["n_steps"], list(maturities))


# ------------------------------------------------------------------- outputs


def _versions() -> dict:
    import numba
    import scipy
    return {"nsdecal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out: Path, cfg: dict, files, started: float, status: str = "ok",
                   error: str | None = None) -> Path:
    rel = sorted({str(Path(f).resolve().relative_to(out.resolve())) for f in files if Path(f).exists()})
    doc = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "files": rel, "versions": _versions(),
           "wall_clock_seconds": round(time.time() - started, 3), "status": status}
    if error:
        doc["error"] = error
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _price_names(J: int) -> list[str]:
    return [f"price_{i + 1}" for i in range(J)]


def iv_draws(chain: Chain, opts: OptionDataset, r: float, d: float) -> np.ndarray:
    prices = chain.matrix(_price_names(opts.J))
    if prices.size == 0:
        return prices
    return _ivs(prices, opts.S0, opts.strikes[None, :], opts.maturities[None, :], r, d)


def write_bands(out: Path, chain: Chain, opts: OptionDataset, cfg: dict, burn_in: int,
                q_lo: float, q_hi: float, lookbacks=()) -> list[Path]:
    files = []
    cells = list(zip(opts.maturities.tolist(), opts.strikes.tolist()))
    names = _price_names(opts.J)
    pb = band(chain, names, burn_in, q_lo, q_hi, cells)
    pb.to_csv(out / "bands_prices.csv")
    files.append(out / "bands_prices.csv")
    ivs = iv_draws(chain, opts, cfg["data"]["r"], cfg["data"]["d"])
    iv_chain = Chain([f"iv_{i + 1}" for i in range(opts.J)])
    for e, s, row in zip(chain.epochs, chain.stages, ivs):
        iv_chain.append(e, row, s)
    mask = iv_chain.after_burn_in(burn_in)
    sub = iv_chain.matrix()[mask]
    qs_lo, qs_md, qs_hi = (np.full(opts.J, np.nan) for _ in range(3))
    from .kernels import column_quantiles
    if sub.shape[0]:
        qs = column_quantiles(sub, [q_lo, 0.5, q_hi])
        qs_lo, qs_md, qs_hi = qs
    with open(out / "bands_iv.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["maturity", "strike", "lower", "median", "upper"])
        for (t, k), a, b, c in zip(cells, qs_lo, qs_md, qs_hi):
            w.writerow([_fmt(t), _fmt(k), _fmt(a), _fmt(b), _fmt(c)])
    files.append(out / "bands_iv.csv")
    if lookbacks:
        lb = band(chain, [f"lookback_{i + 1}" for i in range(len(lookbacks))], burn_in, q_lo, q_hi,
                  [(t, "floating") for t in lookbacks])
        lb.to_csv(out / "bands_lookback.csv")
        files.append(out / "bands_lookback.csv")
    return files


# ----------------------------------------------------------------- calibrate


def calibrate(cfg: dict, out_dir, progress=None) -> dict:
    """Run the configured calibration; returns a summary dict."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    files.append(out / "config.json")

    md = make_market_data(cfg)
    files += write_market_data(md, out / "data")
    opts = md.options
    mode = cfg["mode"]
    ts = md.timeseries if mode == "joint" else None
    mats = sorted(set(opts.maturities.tolist()))
    lookbacks = list(cfg["bands"]["lookback_maturities"])
    grid = make_grid(cfg, mats + lookbacks)
    seg_ends = mats if mode == "staged" else None
    model = build_model(cfg, seg_ends)
    hyper = hyper_from_config(cfg)
    cal = Calibrator(model, grid, opts, ts, hyper, lookback_maturities=lookbacks)

    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    every = max(1, int(cfg.get("outputs", {}).get("snapshot_every", 10)))

    def on_epoch(rec):
        if rec.epoch >= hyper.burn_in and (rec.epoch - hyper.burn_in) % every == 0:
            p = snaps / f"model_s{rec.stage}_e{rec.epoch:06d}.json"
            p.write_text(json.dumps(model.to_dict()))
            files.append(p)
        if progress is not None:
            progress(rec)

    trace = out / "trace.csv"
    status, error = "ok", None
    try:
        if mode == "staged":
            _, hedges = algorithm2_run(cal, hyper.epochs, on_epoch)
        else:
            cal.run(hyper.epochs, on_epoch)
            hedges = [cal.hedge]
    except Exception as exc:
        status, error = "failed", str(exc)
        trace_export(cal.chain, trace)
        files.append(trace)
        write_manifest(out, cfg, files, started, status, error)
        raise
    trace_export(cal.chain, trace)
    files.append(trace)

    (snaps / "final_model.json").write_text(json.dumps(model.to_dict()))
    files.append(snaps / "final_model.json")
    for k, h in enumerate(hedges):
        if h is not None:
            p = snaps / f"final_hedge_{k}.json"
            p.write_text(h.net.to_json())
            files.append(p)

    summary = {"epochs": hyper.epochs, "draws": len(cal.chain), "status": status}
    if len(cal.chain):
        g = cal.chain.series("G")
        summary["final_G"] = float(g[-1])
        try:
            files += write_bands(out, cal.chain, opts, cfg, hyper.burn_in, cfg["bands"]["q_lo"],
                                 cfg["bands"]["q_hi"], lookbacks)
            widths = band(cal.chain, _price_names(opts.J), hyper.burn_in, cfg["bands"]["q_lo"],
                          cfg["bands"]["q_hi"]).width()
            summary["mean_band_width"] = float(np.mean(widths))
        except ValueError as exc:
            log.warning("bands not written: %s", exc)
            summary["bands"] = str(exc)
    write_manifest(out, cfg, files, started, status)
    summary["out"] = str(out)
    return summary


# -------------------------------------------------------------------- sweep


def sweep(cfg: dict, out_dir, grid_override: dict | None = None, progress=None) -> Path:
    """One calibration per (sigma_prior, delta) cell; writes comparison.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = dict(cfg.get("sweep", {}))
    if grid_override:
        spec.update(grid_override)
    sps = spec.get("sigma_prior") or [cfg["hyper"].get("sigma_prior")]
    ds = spec.get("delta") or [_delta(cfg["hyper"])]
    if not sps or not ds:
        raise ValueError("sweep grid is empty")
    rows = []
    for i, sp in enumerate(sps):
        for j, dl in enumerate(ds):
            cell = json.loads(json.dumps(cfg))
            cell.pop("sweep", None)
            if sp is not None:
                cell["hyper"]["sigma_prior"] = float(sp)
            if dl is not None:
                cell["hyper"].pop("delta2", None)
                cell["hyper"]["delta"] = float(dl)
            name = f"cell_sp{i}_d{j}"
            try:
                res = calibrate(cell, out / name, progress)
                rows.append([name, sp, dl, res.get("final_G", float("nan")),
                             res.get("mean_band_width", float("nan")), "ok"])
            except Exception as exc:  # one failing cell must not stop the sweep
                log.error("sweep cell %s failed: %s", name, exc)
                rows.append([name, sp, dl, float("nan"), float("nan"), f"failed: {exc}"])
    path = out / "comparison.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "sigma_prior", "delta", "final_G", "mean_band_width", "status"])
        for row in rows:
            w.writerow([row[0], "" if row[1] is None else _fmt(row[1]), "" if row[2] is None else _fmt(row[2]),
                        _fmt(row[3]), _fmt(row[4]), row[5]])
    return path


# ------------------------------------------------------- post-hoc (saved runs)


def _load_run(run_dir) -> tuple[Path, dict]:
    run = Path(run_dir)
    try:
        cfg = json.loads((run / "config.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{run} is not a calibration run directory (no config.json)") from None
    return run, cfg


def surface_from_trace(run_dir, burn_in: int | None = None, q_lo: float | None = None,
                       q_hi: float | None = None, out_dir=None) -> list[Path]:
    """Recompute band CSVs from a saved trace."""
    run, cfg = _load_run(run_dir)
    chain = trace_import(run / "trace.csv")
    md = load_market_csv(run / "data" / "options.csv", None, cfg["data"]["S0"])
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    return write_bands(out, chain, md.options, cfg,
                       cfg["hyper"]["burn_in"] if burn_in is None else burn_in,
                       cfg["bands"]["q_lo"] if q_lo is None else q_lo,
                       cfg["bands"]["q_hi"] if q_hi is None else q_hi,
                       cfg["bands"]["lookback_maturities"])


def price_from_snapshots(run_dir, maturities, M: int = 2000, q_lo: float | None = None,
                         q_hi: float | None = None, out_dir=None) -> Path:
    """Posterior floating lookback put prices from the saved post-burn-in snapshots."""
    run, cfg = _load_run(run_dir)
    snaps = sorted((run / "snapshots").glob("model_s*_e*.json"))
    if snaps:
        # staged runs: only the last stage holds every segment in its sampled state
        last = max(int(p.name.split("_")[1][1:]) for p in snaps)
        snaps = [p for p in snaps if int(p.name.split("_")[1][1:]) == last]
    if not snaps:
        raise FileNotFoundError(f"no posterior snapshots in {run / 'snapshots'}")
    mats = [float(t) for t in maturities]
    grid = TimeGrid.including(cfg["grid"]["T"], cfg["grid"]["n_steps"], mats)
    chain = Chain([f"lookback_{i + 1}" for i in range(len(mats))])
    for k, path in enumerate(snaps):
        model = NeuralSDEModel.from_dict(json.loads(path.read_text()))
        with dk.no_grad():
            pb = simulate_q(model, grid, M=M, rng=stream(cfg["seed"], "pricing", 0, k))
        vals = [mc_price_cv(pb, OptionSpec.lookback_put(grid.index_of(t)), None, model.r, model.d).mean
                for t in mats]
        chain.append(k, vals)
    q_lo = cfg["bands"]["q_lo"] if q_lo is None else q_lo
    q_hi = cfg["bands"]["q_hi"] if q_hi is None else q_hi
    b = band(chain, chain.names, 0, q_lo, q_hi, [(t, "floating") for t in mats],
             min_draws=min(10, len(snaps)))
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    path = out / "posterior_lookback.csv"
    b.to_csv(path)
    return path
