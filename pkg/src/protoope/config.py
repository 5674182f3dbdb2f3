"""Experiment configuration: a flat ``key = value`` text file plus CLI overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .prototype import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EstimatorSpec:
    kind: str  # "feedforward" or "prototype"
    n_prototypes: int = 10
    q: int = 2

    @property
    def label(self) -> str:
        return "feedforward" if self.kind == "feedforward" else f"prototype({self.n_prototypes},{self.q})"

    @classmethod
    def parse(cls, text: str) -> "EstimatorSpec":
        parts = text.strip().split(":")
        if parts[0] == "feedforward" and len(parts) == 1:
            return cls("feedforward")
        if parts[0] == "prototype" and len(parts) == 3:
            return cls("prototype", int(parts[1]), int(parts[2]))
        raise ValueError(f"bad estimator spec {text!r} (use 'feedforward' or 'prototype:n:q')")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    # simulator and data
    horizon: int = 15
    horizons: list = field(default_factory=lambda: [5, 10, 15, 20, 25, 30])
    discount: float = 1.0
    behavior_epsilon: float = 0.1
    target_epsilon: float = 0.01
    n_train_pairs: int = 20000
    n_calib_pairs: int = 20000
    n_eval_pairs: int = 20000
    # behavior estimator
    estimator: str = "prototype"
    encoder: str = "ffn"
    n_prototypes: int = 10
    q: int = 2
    epochs: int = 30
    batch_size: int = 128
    projection_period: int = 5
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    lambda_d: float = 1e-3
    lambda_c: float = 1e-3
    lambda_e: float = 1e-3
    d_min: float = 2.0
    cv: bool = True
    cv_folds: int = 3
    calibrate: bool = True
    metric_bootstrap: int = 1000
    # evaluation
    target: str = "learned"
    overlap_threshold: float = 0.01
    prototype_times: list = field(default_factory=lambda: [0, 2])
    value_bootstrap: int = 100
    # bias sweep
    replications: int = 10
    sweep_estimators: list = field(
        default_factory=lambda: ["feedforward", "prototype:10:2", "prototype:10:5", "prototype:100:5"]
    )
    sweep_cv: bool = True
    sweep_cv_horizon: int = 15

    def validate(self) -> None:
        errors = []

        def need(cond, name, msg):
            if not cond:
                errors.append(f"{name}: {msg}")

        for name in ("horizon", "n_train_pairs", "n_calib_pairs", "n_eval_pairs", "epochs", "batch_size",
                     "projection_period", "n_prototypes", "q", "replications", "cv_folds"):
            need(getattr(self, name) >= (0 if name == "epochs" else 1), name, "must be >= 1")
        need(self.cv_folds >= 2, "cv_folds", "must be >= 2")
        need(0.0 < self.discount <= 1.0, "discount", "must lie in (0, 1]")
        need(0.0 <= self.behavior_epsilon <= 1.0, "behavior_epsilon", "must lie in [0, 1]")
        need(0.0 <= self.target_epsilon <= 1.0, "target_epsilon", "must lie in [0, 1]")
        need(self.estimator in ("prototype", "feedforward"), "estimator", "must be 'prototype' or 'feedforward'")
        need(self.encoder in ("ffn", "rnn"), "encoder", "must be 'ffn' or 'rnn'")
        need(1 <= self.q <= self.n_prototypes, "q", "must satisfy 1 <= q <= n_prototypes")
        need(self.d_min > 0, "d_min", "must be > 0")
        for name in ("lambda_d", "lambda_c", "lambda_e", "learning_rate", "weight_decay"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(0.0 < self.overlap_threshold < 1.0, "overlap_threshold", "must lie in (0, 1)")
        need(len(self.horizons) > 0 and all(h >= 1 for h in self.horizons), "horizons", "must be a non-empty list of positive integers")
        need(all(t >= 0 for t in self.prototype_times), "prototype_times", "must be >= 0")
        need(self.value_bootstrap >= 1 and self.metric_bootstrap >= 1, "value_bootstrap/metric_bootstrap", "must be >= 1")
        for spec in self.sweep_estimators:
            try:
                s = EstimatorSpec.parse(spec)
                need(s.kind == "feedforward" or 1 <= s.q <= s.n_prototypes, "sweep_estimators", f"{spec}: q out of range")
            except ValueError as exc:
                errors.append(f"sweep_estimators: {exc}")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            n_prototypes=self.n_prototypes, q=self.q, lambda_d=self.lambda_d, lambda_c=self.lambda_c,
            lambda_e=self.lambda_e, d_min=self.d_min, epochs=self.epochs, batch_size=self.batch_size,
            projection_period=self.projection_period, seed=self.seed, encoder=self.encoder,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


PRESETS = {
    "reduced": {"n_train_pairs": 5000, "n_calib_pairs": 5000, "n_eval_pairs": 5000,
                "horizons": [5, 15, 30], "replications": 3},
    "full": {},
}


def _convert(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        if typ is list or typ == "list":
            return [p.strip() for p in raw.strip("[]").split(",") if p.strip()]
        return raw.strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


_LIST_ITEM = {"horizons": int, "prototype_times": int, "sweep_estimators": str}


def _field_types() -> dict:
    return {f.name: f.type for f in fields(ExperimentConfig)}


def apply_overrides(cfg: ExperimentConfig, values: dict) -> ExperimentConfig:
    """Set fields from raw strings (or already-typed values), with field-level errors."""
    types = _field_types()
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration field")
        typ = types[key]
        value = raw if not isinstance(raw, str) else _convert(key, typ, raw)
        if key in _LIST_ITEM:
            try:
                value = [_LIST_ITEM[key](v) for v in value]
            except ValueError:
                raise ConfigError(f"{key}: list items must be {_LIST_ITEM[key].__name__}") from None
        setattr(cfg, key, value)
    return cfg


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[str] = None, preset: Optional[str] = None, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}")
        apply_overrides(cfg, PRESETS[preset])
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config: file {path} does not exist")
        apply_overrides(cfg, parse_config_text(p.read_text()))
    apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg
