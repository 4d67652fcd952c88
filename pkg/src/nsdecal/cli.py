"""Command-line entry point ``nsdecal``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PRESETS, ConfigError, load_config

log = logging.getLogger("nsdecal")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("--preset", choices=PRESETS, help="named preset (merged under --config)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, help="output directory (default: outputs.dir)")
    p.add_argument("--epochs", type=int, help="override hyper.epochs")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsdecal", description="Bayesian neural SDE calibration")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic market data (options, time series, params)")
    _common(p)
    p = sub.add_parser("calibrate", help="run a calibration and write traces, bands and snapshots")
    _common(p)
    p = sub.add_parser("sweep", help="calibrate over a grid of prior widths and noise levels")
    _common(p)
    p.add_argument("--sigma-prior", type=float, nargs="+", help="prior widths to sweep")
    p.add_argument("--delta", type=float, nargs="+", help="noise levels to sweep")

    p = sub.add_parser("price", help="posterior lookback put prices from a run's snapshots")
    p.add_argument("--run", type=Path, required=True, help="calibration run directory")
    p.add_argument("--maturities", type=float, nargs="+", required=True)
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--q-lo", type=float)
    p.add_argument("--q-hi", type=float)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("surface", help="recompute band CSVs from a run's trace")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--q-lo", type=float)
    p.add_argument("--q-hi", type=float)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("uat-bound", help="minimal localisation radius and width for accuracy eps")
    for name in ("T", "C", "L", "k1r", "k2r", "x0", "eps", "K"):
        p.add_argument(f"--{name}", type=float, required=True)
    return ap


def _config(args) -> dict:
    if args.config is None and args.preset is None:
        raise ConfigError("give --config and/or --preset")
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        over["hyper"] = {"epochs": args.epochs}
    return load_config(args.config, args.preset, over)


def _out(args, cfg) -> Path:
    return args.out if args.out is not None else Path(cfg["outputs"]["dir"])


def _progress(rec) -> None:
    log.info("stage %d epoch %d  G=%.6g  log_post=%.6g", rec.stage, rec.epoch, rec.G, rec.log_post)


def _run(args) -> int:
    from . import runner

    if args.command == "uat-bound":
        from .uat import UatInputs, uat_bounds
        try:
            inp = UatInputs(T=args.T, C=args.C, L=args.L, k1r=args.k1r, k2r=args.k2r,
                            X0_norm=args.x0, eps=args.eps, K=args.K)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print(uat_bounds(inp).to_json())
        return EXIT_OK
    if args.command == "surface":
        for f in runner.surface_from_trace(args.run, args.burn_in, args.q_lo, args.q_hi, args.out):
            print(f)
        return EXIT_OK
    if args.command == "price":
        print(runner.price_from_snapshots(args.run, args.maturities, args.paths, args.q_lo, args.q_hi,
                                          args.out))
        return EXIT_OK

    cfg = _config(args)
    out = _out(args, cfg)
    if args.command == "generate":
        for f in runner.generate(cfg, out):
            print(f)
    elif args.command == "calibrate":
        print(json.dumps(runner.calibrate(cfg, out, _progress), sort_keys=True))
    elif args.command == "sweep":
        grid = {}
        if args.sigma_prior:
            grid["sigma_prior"] = args.sigma_prior
        if args.delta:
            grid["delta"] = args.delta
        print(runner.sweep(cfg, out, grid, _progress))
    return EXIT_OK


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
