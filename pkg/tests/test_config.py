import pytest

from drgrade.config import (ConfigError, RunConfig, apply_overrides,
                            load_config, parse_config)


def test_defaults():
    cfg = RunConfig()
    assert cfg.resolution == 96
    assert cfg.lam == 0.5
    assert cfg.dropout_p == 0.2
    assert cfg.mc_samples == 20
    assert cfg.tau == 0.5
    assert cfg.seed == 0


def test_parse_full_file():
    cfg = parse_config("""
# comment line
resolution = 64
lambda = 0.25   # trailing comment
dropout_p = 0.1
mc_samples = 7
tau = 0.4
seed = 42
classifier_epochs = 3
""")
    assert cfg.resolution == 64
    assert cfg.lam == 0.25
    assert cfg.dropout_p == 0.1
    assert cfg.mc_samples == 7
    assert cfg.tau == 0.4
    assert cfg.seed == 42
    assert cfg.classifier_epochs == 3
    # untouched keys keep defaults
    assert cfg.enhance_epochs == RunConfig().enhance_epochs


def test_empty_text_gives_defaults():
    assert parse_config("") == RunConfig()
    assert parse_config("\n\n# only comments\n") == RunConfig()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("resolutoin = 128")
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("lam = 0.5")  # file key is `lambda`


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("resolution 128")


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config("resolution = big")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config("tau = half")


@pytest.mark.parametrize("line", [
    "resolution = 30",      # not divisible by 4
    "resolution = 12",      # below minimum
    "lambda = -0.1",
    "dropout_p = 1.0",
    "dropout_p = -0.2",
    "mc_samples = 0",
    "tau = 0.0",
    "tau = 1.0",
    "seed = -1",
    "enhance_lr = 0",
    "classifier_epochs = 0",
    "enhance_pairs = -5",
])
def test_range_validation(line):
    with pytest.raises(ConfigError):
        parse_config(line)


def test_load_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("mc_samples = 11\nlambda = 2.0\n")
    cfg = load_config(p)
    assert cfg.mc_samples == 11 and cfg.lam == 2.0


def test_apply_overrides():
    cfg = apply_overrides(RunConfig(), {"tau": "0.3", "mc_samples": 4})
    assert cfg.tau == 0.3 and cfg.mc_samples == 4
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"bogus": 1})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"tau": "2.0"})


def test_to_dict_round_trips_through_parse():
    cfg = RunConfig(resolution=64, lam=1.5, seed=9)
    text = "\n".join(f"{k} = {v}" for k, v in cfg.to_dict().items())
    assert parse_config(text) == cfg
