"""Flat run configuration: defaults, ``key = value`` files, environment and flag overrides."""
from __future__ import annotations

import configparser
import os
import typing
from dataclasses import asdict, dataclass, fields

from .synth_data import BenchmarkConfig
from .trainer import TrainConfig

ENV_PREFIX = "RUACKIT_"


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # training
    beta: float = 0.05
    gamma: float = 0.2
    lambda_cal: float = 0.1
    eps_style: float = 0.3
    eps_shift: typing.Optional[float] = None
    eps_deform: float = 0.15
    lr_head: float = 1e-4
    lr_attack_start: float = 1e-3
    lr_attack_end: float = 1e-4
    weight_decay: float = 1e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    epochs: int = 20
    p1: float = 0.2
    p2: float = 0.3
    kl_element_scale: float = 1e-6
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prior_alpha: float = 1.0
    prior_beta: float = 3.0
    batch_size: int = 4
    samples_per_scene: int = 1
    seed: int = 0
    ue_only: bool = False
    style: bool = True
    style_variant: str = "multi"
    deform: bool = True
    cal_to_head: bool = True
    grl_scale: float = 1.0
    # benchmark
    n_train: int = 64
    n_val: int = 16
    n_ood: int = 32
    height: int = 64
    width: int = 64
    bench_seed: int = 0
    # evaluation
    mc_samples: int = 20
    patch_size: int = 4
    eval_seed: int = 0

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def bench_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(n_train=self.n_train, n_val=self.n_val, n_ood=self.n_ood,
                               H=self.height, W=self.width, seed=self.bench_seed)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_render(v)}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def coerce(key: str, raw):
    if key not in _TYPES:
        raise ConfigError(key, "unknown configuration key")
    typ = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "typing.Optional[float]":
            return None if text.lower() in ("none", "") else float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ}") from None


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file (``#``/``;`` comments) into raw strings."""
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[run]\n" + text)
    return dict(cp["run"])


def parse_config(path=None, overrides=None, env=None) -> RunConfig:
    """Defaults < file < ``RUACKIT_*`` environment < explicit overrides."""
    values = {}
    if path is not None:
        for k, v in read_config_file(path).items():
            values[k] = coerce(k, v)
    env = os.environ if env is None else env
    for k, v in env.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower()
            values[key] = coerce(key, v)
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    cfg = RunConfig(**values)
    cfg.train_config()  # validates ranges
    return cfg
