"""Run configuration: a flat set of `key = value` settings.

One plain-text format everywhere: blank lines and `#` comments ignored,
unknown keys rejected, CLI flags override file values. The `lambda` key maps
to the `lam` field (keyword clash).
"""

from dataclasses import dataclass, fields

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config",
           "apply_overrides", "CONFIG_KEYS"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    resolution: int = 96
    lam: float = 0.5  # weight of the attenuation-consistency penalty
    dropout_p: float = 0.2
    mc_samples: int = 20
    tau: float = 0.5
    seed: int = 0
    enhance_lr: float = 0.05
    enhance_epochs: int = 10
    enhance_batch: int = 8
    enhance_pairs: int = 200  # stage-1 training pair cap, 0 = no cap
    classifier_lr: float = 0.02
    classifier_epochs: int = 14
    classifier_batch: int = 32

    def to_dict(self) -> dict:
        return {key: getattr(self, attr) for key, (attr, _) in CONFIG_KEYS.items()}


# config-file key -> (field name, parser)
CONFIG_KEYS = {f.name: (f.name, f.type) for f in fields(RunConfig)}
CONFIG_KEYS["lambda"] = ("lam", float)
del CONFIG_KEYS["lam"]


def _parse_value(key, attr, typ, raw):
    try:
        if typ is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")


def _validate(cfg: RunConfig):
    checks = [
        (cfg.resolution >= 16 and cfg.resolution % 4 == 0,
         "resolution must be >= 16 and divisible by 4"),
        (cfg.lam >= 0.0, "lambda must be >= 0"),
        (0.0 <= cfg.dropout_p < 1.0, "dropout_p must be in [0, 1)"),
        (cfg.mc_samples >= 1, "mc_samples must be >= 1"),
        (0.0 < cfg.tau < 1.0, "tau must be in (0, 1)"),
        (cfg.seed >= 0, "seed must be >= 0"),
        (cfg.enhance_lr > 0.0, "enhance_lr must be > 0"),
        (cfg.enhance_epochs >= 1, "enhance_epochs must be >= 1"),
        (cfg.enhance_batch >= 1, "enhance_batch must be >= 1"),
        (cfg.enhance_pairs >= 0, "enhance_pairs must be >= 0"),
        (cfg.classifier_lr > 0.0, "classifier_lr must be > 0"),
        (cfg.classifier_epochs >= 1, "classifier_epochs must be >= 1"),
        (cfg.classifier_batch >= 1, "classifier_batch must be >= 1"),
    ]
    for ok, why in checks:
        if not ok:
            raise ConfigError(why)
    return cfg


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        attr, typ = CONFIG_KEYS[key]
        setattr(cfg, attr, _parse_value(key, attr, typ, raw))
    return _validate(cfg)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Replace settings from {config key: raw string or number}. Validates."""
    for key, raw in overrides.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, typ = CONFIG_KEYS[key]
        value = raw if isinstance(raw, (int, float)) else _parse_value(key, attr, typ, raw)
        setattr(cfg, attr, typ(value))
    return _validate(cfg)
