"""Flat ``key = value`` experiment files (``#`` starts a comment).

Every field of :class:`FCLViTConfig`, :class:`TrainConfig` and
:class:`DataConfig` is addressable by its name; ``lambda`` is accepted as an
alias for ``lam``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import FCLViTConfig
from .trainer import TrainConfig

ALIASES = {"lambda": "lam", "d": "depth", "D": "dim", "h": "heads", "p": "dropout"}


@dataclass
class DataConfig:
    """Where the continual tasks come from.

    ``source = synthetic`` builds the procedural benchmark; ``source =
    manifest`` reads raw records described by the manifest at ``manifest``
    (pretraining then uses the first ``base_classes`` classes).
    """

    source: str = "synthetic"
    manifest: str = ""
    data_seed: int = -1  # -1: follow the run seed
    base_classes: int = 14
    task_classes: int = 6
    classes_per_task: int = 2
    samples_per_class: int = 80
    noise: float = 0.08


@dataclass
class ExperimentConfig:
    model: FCLViTConfig = field(default_factory=FCLViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    # multiplier applied to every lambda given to sweep-lambda / ablate-tsb
    lambda_scale: float = 1.0
    lambdas: tuple = (0.0, 1.0, 10.0, 100.0, 1000.0)

    def effective_data_seed(self):
        return self.train.seed if self.data.data_seed < 0 else self.data.data_seed

    def to_text(self):
        lines = []
        for section in (self.model, self.train, self.data):
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
        lines.append(f"lambda_scale = {self.lambda_scale!r}")
        lines.append("lambdas = " + ",".join(repr(x) for x in self.lambdas))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, ftype, key):
    raw = raw.strip()
    t = str(ftype)
    try:
        if "bool" in t:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "None" in t and raw.lower() in ("none", ""):
            return None
        if "int" in t:
            return int(raw)
        if "float" in t:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t}") from None


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"line {lineno}: empty key")
        out[ALIASES.get(k, k)] = v.strip()
    return out


def parse_float_list(raw: str):
    try:
        vals = tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad number list {raw!r}") from None
    if not vals:
        raise ConfigError("empty number list")
    return vals


def build_config(pairs: dict) -> ExperimentConfig:
    pairs = dict(pairs)
    sections = {}
    for name, cls in (("model", FCLViTConfig), ("train", TrainConfig), ("data", DataConfig)):
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in pairs:
                kw[f.name] = _coerce(pairs.pop(f.name), f.type, f.name)
        try:
            sections[name] = cls(**kw)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
    cfg = ExperimentConfig(**sections)
    if "lambda_scale" in pairs:
        cfg.lambda_scale = _coerce(pairs.pop("lambda_scale"), "float", "lambda_scale")
    if "lambdas" in pairs:
        cfg.lambdas = parse_float_list(pairs.pop("lambdas"))
    if pairs:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(pairs))}")
    if cfg.data.source not in ("synthetic", "manifest"):
        raise ConfigError(f"data source must be 'synthetic' or 'manifest', got {cfg.data.source!r}")
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return build_config(parse_pairs(text))
