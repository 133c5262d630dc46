"""Experiment configuration: JSON loading, ``key=value`` overrides, validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .model import ModelSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


@dataclass
class ModelConfig:
    kind: str = "linear"
    hidden_dims: list[int] = field(default_factory=list)
    activation: str = "relu"


@dataclass
class GeneratorSettings:
    heterogeneity: float = 2.0
    noise_std: float = 0.1
    nonlinearity_scale: float = 0.25
    farm_offset_std: float = 0.02
    # int, or one entry per farm
    n_train: int | list[int] = 60
    n_test: int = 30
    # scalar, or one entry per feature
    feature_low: float | list[float] = -1.0
    feature_high: float | list[float] = 1.0
    identical_crops: bool = False


@dataclass
class ExperimentConfig:
    N: int = 10
    K: int = 6
    d: int = 6
    E: int = 10
    # int, or one entry per crop
    T_k: int | list[int] = 15
    eta: float = 0.1
    seed: int = 0
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    out_dir: str = "out"

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.model.kind, self.d, tuple(self.model.hidden_dims),
                         self.model.activation)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.eta, self.E)

    def rounds_for(self, crop_id: int) -> int:
        if isinstance(self.T_k, list):
            return self.T_k[crop_id]
        return self.T_k

    def n_train_for(self, farm_id: int) -> int:
        n = self.generator.n_train
        return n[farm_id] if isinstance(n, list) else n

    def to_dict(self, *, include_out_dir: bool = True) -> dict[str, Any]:
        out = asdict(self)
        if not include_out_dir:
            out.pop("out_dir")
        return out

    def validate(self) -> ExperimentConfig:
        _check(_is_int(self.K) and self.K >= 1, "K", "must be an integer >= 1")
        _check(_is_int(self.N) and self.N >= self.K, "N", f"must be an integer >= K ({self.K})")
        _check(_is_int(self.d) and self.d >= 1, "d", "must be an integer >= 1")
        _check(_is_int(self.E) and self.E >= 1, "E", "must be an integer >= 1")
        _check(_is_int(self.seed), "seed", "must be an integer")
        _check(_is_int(self.workers) and self.workers >= 1, "workers", "must be an integer >= 1")
        if isinstance(self.T_k, list):
            _check(len(self.T_k) == self.K and all(_is_int(t) and t >= 1 for t in self.T_k),
                   "T_k", f"must list {self.K} integers >= 1")
        else:
            _check(_is_int(self.T_k) and self.T_k >= 1, "T_k", "must be an integer >= 1")
        _check(_is_num(self.eta) and self.eta > 0, "eta", "must be a positive number")
        _check(isinstance(self.out_dir, str) and self.out_dir != "", "out_dir", "must be a path")

        m = self.model
        _check(m.kind in ("linear", "mlp"), "model.kind", "must be 'linear' or 'mlp'")
        _check(isinstance(m.hidden_dims, list) and all(_is_int(h) and h >= 1 for h in m.hidden_dims),
               "model.hidden_dims", "must be a list of positive integers")
        if m.kind == "linear":
            _check(not m.hidden_dims, "model.hidden_dims", "must be empty for a linear model")
        else:
            _check(bool(m.hidden_dims), "model.hidden_dims", "mlp needs at least one hidden layer")
        _check(m.activation in ("relu", "tanh"), "model.activation", "must be 'relu' or 'tanh'")

        g = self.generator
        for name in ("heterogeneity", "noise_std", "nonlinearity_scale", "farm_offset_std"):
            v = getattr(g, name)
            _check(_is_num(v) and v >= 0, f"generator.{name}", "must be a non-negative number")
        if isinstance(g.n_train, list):
            _check(len(g.n_train) == self.N and all(_is_int(n) and n >= 1 for n in g.n_train),
                   "generator.n_train", f"must list {self.N} integers >= 1")
        else:
            _check(_is_int(g.n_train) and g.n_train >= 1, "generator.n_train", "must be an integer >= 1")
        _check(_is_int(g.n_test) and g.n_test >= 1, "generator.n_test", "must be an integer >= 1")
        lo = _per_dim(g.feature_low, self.d, "generator.feature_low")
        hi = _per_dim(g.feature_high, self.d, "generator.feature_high")
        _check(all(a < b for a, b in zip(lo, hi)), "generator.feature_low",
               "must be below feature_high in every dimension")
        _check(isinstance(g.identical_crops, bool), "generator.identical_crops", "must be true/false")
        return self


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {msg}")


def _per_dim(v, d: int, name: str) -> list[float]:
    if _is_num(v):
        return [float(v)] * d
    _check(isinstance(v, list) and len(v) == d and all(_is_num(x) for x in v),
           name, f"must be a number or a list of {d} numbers")
    return [float(x) for x in v]


_SECTIONS = {"model": ModelConfig, "generator": GeneratorSettings}


def _build(cls, raw: dict[str, Any], prefix: str = ""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}{key}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            value = _build(_SECTIONS[key], value, f"{key}.")
        kwargs[key] = value
    return cls(**kwargs)


def _apply_override(raw: dict[str, Any], assignment: str) -> None:
    key, sep, text = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {assignment!r}: expected key=value")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.split(".")
    target = raw
    for part in parts[:-1]:
        nested = target.setdefault(part, {})
        if not isinstance(nested, dict):
            raise ConfigError(f"{key}: {part} is not a section")
        target = nested
    target[parts[-1]] = value


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Load a JSON config (or start from defaults), apply ``key=value`` overrides
    (dotted keys reach into ``model`` / ``generator``), and validate."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for item in overrides:
        _apply_override(raw, item)
    try:
        cfg = _build(ExperimentConfig, raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(include_out_dir=False), indent=2, sort_keys=True) + "\n"
