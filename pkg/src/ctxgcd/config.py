"""Experiment configuration: nested dataclasses with a strict JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import FORMATS
from .errors import ConfigError, IoError
from .trainer import TrainConfig

ABLATIONS = {
    "full": {},
    "baseline": {"lambda_n": 0.0, "lambda_c": 0.0},
    "no-ln": {"lambda_n": 0.0},
    "no-lc": {"lambda_c": 0.0},
}


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 6
    n_old: int = 3
    dim: int = 16
    n_per_class: int = 100
    class_sep: float = 8.0
    sigma: float = 1.0
    labeled_ratio: float = 0.5
    path: typing.Optional[str] = None
    format: typing.Optional[str] = None

    def __post_init__(self):
        if not 1 <= self.n_old <= self.n_classes:
            raise ConfigError(f"need 1 <= n_old <= n_classes (got n_old={self.n_old}, n_classes={self.n_classes})")
        if self.format is not None and self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        del d["train"]["seed"]  # the top-level seed is canonical
        return _lists(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "train" in d and isinstance(d["train"], dict) and "seed" in d["train"]:
            raise ConfigError("unknown key 'train.seed' (use the top-level seed)")
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise IoError(f"no such config file: {path}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    # -- overrides -------------------------------------------------------

    def with_override(self, key: str, value) -> "ExperimentConfig":
        """Replace one field addressed by dotted path or by unique leaf name."""
        return self.with_overrides([(key, value)])

    def with_overrides(self, items) -> "ExperimentConfig":
        """Apply several ``(key, value)`` overrides, validating only the result.

        Fields that constrain each other (say ``epochs`` and ``warmup_epochs``)
        can thus be changed together in any order.
        """
        d = self.to_dict()
        for key, value in items:
            *parents, leaf = resolve_key(key)
            node = d
            for name in parents:
                node = node[name]
            node[leaf] = value
        return ExperimentConfig.from_dict(d)

    def with_ablation(self, name: str) -> "ExperimentConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        cfg = self
        for k, v in ABLATIONS[name].items():
            cfg = cfg.with_override(f"train.loss.{k}", v)
        return cfg


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, where)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got {value!r}")
    return value


def _build(cls, d: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def _leaf_paths(cls, prefix=()):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            yield from _leaf_paths(tp, prefix + (f.name,))
        else:
            yield prefix + (f.name,)


def resolve_key(key: str) -> tuple[str, ...]:
    leaves = [p for p in _leaf_paths(ExperimentConfig) if p != ("train", "seed")]
    parts = tuple(key.split("."))
    hits = [p for p in leaves if p[-len(parts):] == parts]
    if len(hits) != 1:
        raise ConfigError(f"config key {key!r} is {'ambiguous' if hits else 'unknown'}")
    return hits[0]


def parse_value(text: str):
    """Grid/CLI literal: JSON if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
