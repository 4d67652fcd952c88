import pytest

from nsdecal.config import PRESETS, ConfigError, _merge, build_config, config_hash, load_config


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_and_validate(name):
    cfg = build_config(preset=name)
    assert cfg["preset"] == name and cfg["mode"] in ("options_only", "joint", "staged")


def test_merge_order_defaults_preset_scale_user():
    cfg = build_config({"scale": "paper", "hyper": {"M": 123}}, preset="bs-paper")
    assert cfg["hyper"]["M"] == 123                           # user beats scale
    assert cfg["model"]["hidden"] == [100, 100, 100, 100]     # scale beats defaults
    assert cfg["data"]["bs"]["sigma"] == 0.3                  # preset beats defaults


def test_unknown_keys_and_wrong_types_are_rejected():
    with pytest.raises(ConfigError, match="unknown key 'hyper.stepsize'"):
        build_config({"hyper": {"stepsize": 1.0}}, preset="bs-paper")
    with pytest.raises(ConfigError, match="wrong type"):
        build_config({"hyper": {"M": "many"}}, preset="bs-paper")
    with pytest.raises(ConfigError, match="wrong type"):
        build_config({"hyper": {"M": True}}, preset="bs-paper")
    with pytest.raises(ConfigError, match="unknown preset"):
        build_config(preset="nope")


@pytest.mark.parametrize("user, msg", [
    ({"mode": "joint", "data": {"source": "rbergomi", "rbergomi": {"a": -0.4, "eta": 1.0, "xi": 0.04,
                                                                   "rho": 0.0}}}, "time-series"),
    ({"model": {"rho": 1.5}}, "rho"),
    ({"hyper": {"delta": 1.0, "delta2": 1.0}}, "delta"),
    ({"bands": {"q_lo": 0.9, "q_hi": 0.1}}, "q_lo"),
    ({"data": {"source": "csv"}}, "options_csv"),
    ({"mode": "staged", "model": {"rho_trainable": True}}, "rho fixed"),
    ({"sweep": {"delta": []}}, "sweep"),
])
def test_semantic_validation(user, msg):
    base = {"data": {"source": "bs", "bs": {"sigma": 0.3, "mu": 0.05}}}
    with pytest.raises(ConfigError, match=msg):
        build_config(_merge(base, user))


def test_hash_ignores_output_location_only():
    a = build_config({"outputs": {"dir": "x"}}, preset="bs-paper")
    b = build_config({"outputs": {"dir": "y"}}, preset="bs-paper")
    c = build_config({"seed": 1}, preset="bs-paper")
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_load_config_resolves_csv_paths(tmp_path):
    (tmp_path / "opts.csv").write_text("maturity,strike,price\n0.5,1.0,0.1\n")
    (tmp_path / "c.toml").write_text('mode = "options_only"\n[data]\nsource = "csv"\noptions_csv = "opts.csv"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg["data"]["options_csv"] == str((tmp_path / "opts.csv").resolve())
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("mode = \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
