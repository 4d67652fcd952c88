import csv
import json

import numpy as np
import pytest

from nsdecal import runner
from nsdecal.cli import main

SMALL = """
preset = "bs-paper"
[data]
strike_ratios_linspace = [0.9, 1.1, 3]
maturity_steps = [48, 96]
[hyper]
epochs = 12
burn_in = 2
M = 64
hedge_hidden = [8]
[model]
hidden = [8, 8]
[outputs]
snapshot_every = 5
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_bs(tmp_path, small_cfg, capsys):
    assert main(["generate", "--config", str(small_cfg), "--out", str(tmp_path / "g")]) == 0
    rows = _rows(tmp_path / "g" / "options.csv")
    assert list(rows[0]) == ["maturity", "strike", "price", "stderr", "implied_vol"]
    assert len(rows) == 6
    assert all(abs(float(r["implied_vol"]) - 0.3) < 1e-8 for r in rows)
    ts = _rows(tmp_path / "g" / "timeseries.csv")
    assert list(ts[0]) == ["step", "time", "Y", "V"] and len(ts) == 97
    params = json.loads((tmp_path / "g" / "params.json").read_text())
    assert params["sigma"] == 0.3 and params["source"] == "bs"


def test_calibrate_writes_run_directory(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert main(["calibrate", "--config", str(small_cfg), "--out", str(out), "--seed", "3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["draws"] == 12
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and man["status"] == "ok" and len(man["config_hash"]) == 64
    assert {"numpy", "python", "nsdecal"} <= set(man["versions"])
    for f in ["trace.csv", "bands_prices.csv", "bands_iv.csv", "config.json", "data/options.csv",
              "snapshots/final_model.json", "snapshots/final_hedge_0.json", "snapshots/model_s0_e000002.json"]:
        assert f in man["files"] and (out / f).exists()
    assert not (out / "bands_lookback.csv").exists()
    iv = _rows(out / "bands_iv.csv")
    assert all(float(r["lower"]) <= float(r["median"]) <= float(r["upper"]) for r in iv)


def test_zero_epochs_gives_empty_trace_and_valid_manifest(tmp_path, small_cfg, capsys):
    out = tmp_path / "r0"
    assert main(["calibrate", "--config", str(small_cfg), "--out", str(out), "--epochs", "0"]) == 0
    lines = (out / "trace.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("epoch,stage,log_post,G")
    assert json.loads((out / "manifest.json").read_text())["status"] == "ok"


def test_surface_and_price_from_saved_run(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    assert main(["calibrate", "--config", str(small_cfg), "--out", str(out)]) == 0
    assert main(["surface", "--run", str(out), "--burn-in", "0", "--q-lo", "0", "--q-hi", "1",
                 "--out", str(tmp_path / "s")]) == 0
    wide = _rows(tmp_path / "s" / "bands_prices.csv")
    narrow = _rows(out / "bands_prices.csv")
    assert all(float(w["lower"]) <= float(n["lower"]) for w, n in zip(wide, narrow))
    assert main(["price", "--run", str(out), "--maturities", "0.5", "1.0", "--paths", "200"]) == 0
    rows = _rows(out / "posterior_lookback.csv")
    assert [r["strike"] for r in rows] == ["floating", "floating"]
    assert all(float(r["lower"]) > 0 for r in rows)


def test_calibrate_from_generated_csv(tmp_path, small_cfg, capsys):
    gen = tmp_path / "g"
    assert main(["generate", "--config", str(small_cfg), "--out", str(gen)]) == 0
    cfg = tmp_path / "csv.toml"
    cfg.write_text(f"""
mode = "joint"
[model]
factors = 1
with_zeta = true
hidden = [4]
[data]
source = "csv"
r = 0.025
options_csv = "{gen / 'options.csv'}"
timeseries_csv = "{gen / 'timeseries.csv'}"
[grid]
n_steps = 8
[hyper]
epochs = 2
M = 16
delta = 1.0
hedge_hidden = [4]
""")
    assert main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0


def test_sweep_records_failed_cells(tmp_path, small_cfg, monkeypatch, capsys):
    real = runner.calibrate

    def flaky(cfg, out, progress=None):
        if cfg["hyper"]["delta"] == 2.0:
            raise RuntimeError("boom")
        return real(cfg, out, progress)

    monkeypatch.setattr(runner, "calibrate", flaky)
    assert main(["sweep", "--config", str(small_cfg), "--out", str(tmp_path / "sw"), "--epochs", "3",
                 "--sigma-prior", "0.5", "--delta", "1", "2"]) == 0
    rows = _rows(tmp_path / "sw" / "comparison.csv")
    assert [r["status"] for r in rows] == ["ok", "failed: boom"]
    assert rows[0]["sigma_prior"] == "0.5" and np.isfinite(float(rows[0]["final_G"]))


def test_uat_bound_prints_json(capsys):
    assert main(["uat-bound", "--T", "1", "--C", "1", "--L", "1", "--k1r", "0", "--k2r", "0",
                 "--x0", "0", "--eps", "0.5", "--K", "0.05"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["p_min"] >= 1


def test_exit_codes(tmp_path, capsys):
    assert main(["calibrate"]) == 2                                     # neither config nor preset
    assert main(["calibrate", "--preset", "nope"]) == 2                 # argparse usage error
    bad = tmp_path / "bad.toml"
    bad.write_text("[hyper]\nbogus = 1\n")
    assert main(["calibrate", "--config", str(bad)]) == 2
    assert "unknown key 'hyper.bogus'" in capsys.readouterr().err
    assert main(["surface", "--run", str(tmp_path)]) == 1               # not a run directory
    assert main(["uat-bound", "--T", "1", "--C", "1", "--L", "1", "--k1r", "0", "--k2r", "0",
                 "--x0", "0", "--eps", "3", "--K", "0.05"]) == 2


def test_failed_calibration_still_writes_trace_and_manifest(tmp_path, small_cfg, monkeypatch, capsys):
    from nsdecal import bayes

    def broken(self, epoch, st):
        if epoch == 2:
            raise ValueError("injected")
        return orig(self, epoch, st)

    orig = bayes.Calibrator._epoch
    monkeypatch.setattr(bayes.Calibrator, "_epoch", broken)
    out = tmp_path / "fail"
    assert main(["calibrate", "--config", str(small_cfg), "--out", str(out)]) == 1
    assert len((out / "trace.csv").read_text().splitlines()) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "failed" and "injected" in man["error"]
