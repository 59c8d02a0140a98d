"""Experiment configuration and its ``key = value`` INI file format.

Every field lives in a section; unknown sections or keys are rejected::

    [experiment]
    strategy = hetefedrec
    epochs = 30

    [model]
    widths = 8, 16, 32
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import io
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


class Strategy(str, enum.Enum):
    HETEFEDREC = "hetefedrec"
    ALL_SMALL = "all-small"
    ALL_LARGE = "all-large"
    ALL_LARGE_EXCLUSIVE = "all-large-exclusive"
    STANDALONE = "standalone"
    CLUSTERED = "clustered"
    DIRECT_AGGREGATE = "direct-aggregate"

    def __str__(self) -> str:
        return self.value


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


# (section, key in file, field name, parser)
_SCHEMA = [
    ("experiment", "strategy", "strategy", str),
    ("experiment", "seed", "seed", int),
    ("experiment", "epochs", "epochs", int),
    ("experiment", "round_size", "round_size", int),
    ("experiment", "workers", "workers", int),
    ("experiment", "top_k", "top_k", int),
    ("experiment", "base_model", "base_model", str),
    ("data", "source", "source", str),
    ("data", "path", "path", str),
    ("data", "format", "format", str),
    ("data", "users", "synth_users", int),
    ("data", "items", "synth_items", int),
    ("data", "latent_dim", "synth_latent_dim", int),
    ("data", "density_skew", "synth_skew", float),
    ("data", "mean_count", "synth_mean_count", float),
    ("data", "train_frac", "train_frac", float),
    ("data", "quantiles", "quantiles", _floats),
    ("data", "neg_ratio", "neg_ratio", int),
    ("data", "validation_frac", "validation_frac", float),
    ("model", "widths", "widths", _ints),
    ("model", "aligned_init", "aligned_init", _bool),
    ("training", "local_epochs", "local_epochs", int),
    ("training", "lr", "lr", float),
    ("training", "alpha", "alpha", float),
    ("training", "udl", "udl", _bool),
    ("training", "batch_size", "batch_size", int),
    ("training", "aggregate", "aggregate", str),
    ("distillation", "enabled", "kd_enabled", _bool),
    ("distillation", "k", "kd_k", int),
    ("distillation", "steps", "kd_steps", int),
    ("distillation", "lr", "kd_lr", float),
    ("baselines", "exclusive_groups", "exclusive_groups", str),
    ("output", "checkpoint_epochs", "checkpoint_epochs", _ints),
]

_KEY_OF = {name: f"{section}.{key}" for section, key, name, _ in _SCHEMA}


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: Strategy = Strategy.HETEFEDREC
    seed: int = 0
    epochs: int = 30
    round_size: int = 256
    workers: int = 1
    top_k: int = 20
    base_model: str = "ncf"

    source: str = "synthetic"
    path: str = ""
    format: str = ""
    synth_users: int = 200
    synth_items: int = 100
    synth_latent_dim: int = 4
    synth_skew: float = 1.0
    synth_mean_count: float = 0.0  # 0 picks a size-dependent default
    train_frac: float = 0.8
    quantiles: tuple = (0.5, 0.8)
    neg_ratio: int = 4
    validation_frac: float = 0.0

    widths: tuple = (8, 16, 32)
    aligned_init: bool = True

    local_epochs: int = 2
    lr: float = 0.001
    alpha: float = 1.0
    udl: bool = True
    batch_size: int = 0
    aggregate: str = "sum"

    kd_enabled: bool = True
    kd_k: int = 256
    kd_steps: int = 1
    kd_lr: float = 0.001

    exclusive_groups: str = "medium+large"
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        try:
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        except ValueError:
            names = ", ".join(s.value for s in Strategy)
            raise ConfigError(f"experiment.strategy: unknown strategy {self.strategy!r} (expected one of {names})") from None
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        object.__setattr__(self, "checkpoint_epochs", tuple(int(e) for e in self.checkpoint_epochs))
        checks = [
            ("widths", len(self.widths) == 3, "exactly three tier widths are required"),
            ("widths", all(w > 0 for w in self.widths), "tier widths must be positive"),
            ("widths", all(a < b for a, b in zip(self.widths, self.widths[1:])), "tier widths must be strictly increasing"),
            ("quantiles", len(self.quantiles) == 2 and 0 < self.quantiles[0] < self.quantiles[1] < 1,
             "quantiles must be two strictly increasing values in (0, 1)"),
            ("epochs", self.epochs >= 0, "epochs must be >= 0"),
            ("local_epochs", self.local_epochs >= 0, "local_epochs must be >= 0"),
            ("round_size", self.round_size >= 1, "round_size must be >= 1"),
            ("workers", self.workers >= 1, "workers must be >= 1"),
            ("top_k", self.top_k >= 1, "top_k must be >= 1"),
            ("lr", self.lr > 0, "lr must be > 0"),
            ("alpha", self.alpha >= 0, "alpha must be >= 0"),
            ("neg_ratio", self.neg_ratio >= 1, "neg_ratio must be >= 1"),
            ("batch_size", self.batch_size >= 0, "batch_size must be >= 0 (0 = full batch)"),
            ("train_frac", 0 < self.train_frac < 1, "train_frac must lie in (0, 1)"),
            ("validation_frac", 0 <= self.validation_frac < 1, "validation_frac must lie in [0, 1)"),
            ("aggregate", self.aggregate in ("sum", "mean"), "aggregate must be 'sum' or 'mean'"),
            ("base_model", self.base_model in ("ncf", "lightgcn"), "base_model must be 'ncf' or 'lightgcn'"),
            ("source", self.source in ("synthetic", "file"), "source must be 'synthetic' or 'file'"),
            ("path", self.source != "file" or bool(self.path), "path is required when source = file"),
            ("format", self.format in ("", "movielens-dat", "tsv", "csv"), "format must be movielens-dat, tsv or csv"),
            ("kd_k", self.kd_k >= 2, "distillation k must be >= 2"),
            ("kd_steps", self.kd_steps >= 0, "distillation steps must be >= 0"),
            ("kd_lr", self.kd_lr >= 0, "distillation lr must be >= 0"),
            ("exclusive_groups", self.exclusive_groups in ("medium+large", "large"),
             "exclusive_groups must be 'medium+large' or 'large'"),
            ("synth_users", self.synth_users >= 1, "users must be >= 1"),
            ("synth_items", self.synth_items >= 2, "items must be >= 2"),
            ("synth_latent_dim", self.synth_latent_dim >= 1, "latent_dim must be >= 1"),
            ("synth_skew", self.synth_skew >= 0, "density_skew must be >= 0"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(f"{_KEY_OF[name]}: {message}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    for section, key, name, _ in _SCHEMA:
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _format(getattr(config, name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {(s, k): (name, conv) for s, k, name, conv in _SCHEMA}
    sections = {s for s, _, _, _ in _SCHEMA}
    values = {}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if (section, key) not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            name, conv = known[(section, key)]
            try:
                values[name] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: invalid value {raw!r} ({exc})") from None
    return ExperimentConfig(**values)


def parse_config(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))
