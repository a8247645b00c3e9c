"""Experiment configuration: a versioned YAML file plus dotted-key overrides."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class StreamConfig:
    preset: str = "storm"  # storm | fast_storm | constant | custom
    frames_per_domain: int = 1000
    schedule: list | None = None  # [[domain_id, intensity, frames], ...] when preset == custom
    constant_intensity: float = 0.0
    classes: int = 6
    source_size: int = 2000
    skew: float = 3.0
    spread: float = 0.4
    max_angle_deg: float = 45.0
    max_noise: float = 0.15
    shift: float = 8.0


@dataclass
class ModelConfig:
    dims: list = field(default_factory=lambda: [8, 32, 32, 16, 6])
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1
    head_epochs: int = 300
    head_weight_decay: float = 0.05


@dataclass
class HAMTConfig:
    alpha: float = 0.1
    beta: float = 3.0
    cost_mode: str = "flops"
    calib_reps: int = 5
    decay_unselected: bool = True  # unselected values also decay by (1 - alpha)


@dataclass
class DetectorConfig:
    m: int = 100
    z: float | None = None  # absolute threshold; None -> derived from z_mode
    z_mode: str = "span"  # span: z_factor * (B_hard - B_source) | source: z_factor * B_source
    z_factor: float = 0.15
    hard_policy: str = "uniform"  # uniform: ln(C) | factor: hard_factor * B_source | holdout
    hard_factor: float = 4.0


@dataclass
class ModulationSettings:
    k_l_min: float = 200.0
    k_l_max: float = 600.0
    k_eta_min_frac: float = 0.1  # fractions of the pretraining learning rate
    k_eta_max_frac: float = 2.0
    k_cm_min: float = 0.2
    k_cm_max: float = 0.6
    lr_floor: float = 0.0


@dataclass
class TrainerSettings:
    momentum: float = 0.95
    lambda_fd: float = 0.1
    rcs_temperature: float = 0.2
    confidence: float | None = None
    target_window: int = 32
    source_batch: int = 16
    buffer_size: int = 500
    lr: float = 0.05  # fixed adaptation learning rate when ALR is off
    k_cm_fixed: float = 0.5  # ClassMix ratio when DCM is off


@dataclass
class Toggles:
    adapt: bool = True  # False -> frozen source model
    hamt: bool = True
    lt: bool = True
    alr: bool = True
    dcm: bool = True
    rcs: bool = True


@dataclass
class EvalConfig:
    enabled: bool = True
    cadence: int = 200
    holdout_size: int = 200


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    run_id: str = "run"
    seed: int = 0
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hamt: HAMTConfig = field(default_factory=HAMTConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    modulation: ModulationSettings = field(default_factory=ModulationSettings)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    toggles: Toggles = field(default_factory=Toggles)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        _validate(self)
        return self

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"hamt.beta": 1.0})``."""
        return apply_overrides(self, overrides)


def _section_classes() -> dict[str, type]:
    return {
        "stream": StreamConfig,
        "model": ModelConfig,
        "hamt": HAMTConfig,
        "detector": DetectorConfig,
        "modulation": ModulationSettings,
        "trainer": TrainerSettings,
        "toggles": Toggles,
        "eval": EvalConfig,
    }


def _coerce(value: Any, default: Any, key: str) -> Any:
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            return value.lower() in ("true", "1", "yes", "on")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{key}: expected a JSON list, got {value!r}") from None
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(value, str) and default is None:
        # optional numeric / list fields given on the command line
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    return value


def from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
    cfg = ExperimentConfig()
    classes = _section_classes()
    for key, value in data.items():
        if key in classes:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            section = getattr(cfg, key)
            known = {f.name: f for f in fields(section)}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown key {key}.{k}")
                setattr(section, k, _coerce(v, getattr(section, k), f"{key}.{k}"))
        elif key in ("run_id", "seed"):
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return cfg.validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in data and isinstance(data[parts[0]], dict):
            if parts[1] not in data[parts[0]]:
                raise ConfigError(f"unknown key {dotted}")
            data[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"unknown key {dotted}")
    return from_dict(data)


def flag_keys() -> list[tuple[str, Any]]:
    """Every dotted config key with its default; the CLI exposes one flag per key."""
    cfg = ExperimentConfig()
    out: list[tuple[str, Any]] = [("run_id", cfg.run_id), ("seed", cfg.seed)]
    for name in _section_classes():
        for f in fields(getattr(cfg, name)):
            out.append((f"{name}.{f.name}", getattr(getattr(cfg, name), f.name)))
    return out


def _validate(cfg: ExperimentConfig) -> None:
    s, m, h, d, mo, t, e = cfg.stream, cfg.model, cfg.hamt, cfg.detector, cfg.modulation, cfg.trainer, cfg.eval

    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(s.preset in ("storm", "fast_storm", "constant", "custom"), f"stream.preset: unknown preset {s.preset!r}")
    need(s.frames_per_domain > 0, "stream.frames_per_domain must be > 0")
    need(s.preset != "custom" or bool(s.schedule), "stream.schedule is required for preset 'custom'")
    need(0.0 <= s.constant_intensity <= 1.0, "stream.constant_intensity must be in [0, 1]")
    need(s.classes >= 2, "stream.classes must be >= 2")
    need(s.source_size >= s.classes, "stream.source_size must be >= stream.classes")
    need(s.skew >= 1.0, "stream.skew must be >= 1")
    need(len(m.dims) == 5 and all(isinstance(v, int) and v > 0 for v in m.dims), "model.dims must list 5 positive integers")
    need(m.dims[-1] == s.classes, "model.dims[-1] must equal stream.classes")
    need(m.dims[0] == 8, "model.dims[0] must be 8 (stream input dimension)")
    need(m.pretrain_epochs >= 1 and m.pretrain_lr > 0, "model.pretrain_epochs/pretrain_lr must be positive")
    need(m.head_epochs >= 1 and m.head_weight_decay >= 0, "model.head_epochs must be >= 1, head_weight_decay >= 0")
    need(0.0 < h.alpha <= 1.0, "hamt.alpha must be in (0, 1]")
    need(h.beta > 0, "hamt.beta must be > 0")
    need(h.cost_mode in ("flops", "wallclock"), "hamt.cost_mode must be 'flops' or 'wallclock'")
    need(h.calib_reps >= 1, "hamt.calib_reps must be >= 1")
    need(d.m >= 1, "detector.m must be >= 1")
    need(d.z is None or d.z > 0, "detector.z must be > 0")
    need(d.z_factor > 0, "detector.z_factor must be > 0")
    need(d.z_mode in ("span", "source"), "detector.z_mode must be 'span' or 'source'")
    need(d.hard_policy in ("uniform", "factor", "holdout"), "detector.hard_policy must be 'uniform', 'factor' or 'holdout'")
    need(d.hard_factor > 1.0, "detector.hard_factor must be > 1")
    need(0 < mo.k_l_min <= mo.k_l_max, "modulation: need 0 < k_l_min <= k_l_max")
    need(0 < mo.k_eta_min_frac <= mo.k_eta_max_frac, "modulation: need 0 < k_eta_min_frac <= k_eta_max_frac")
    need(0 <= mo.k_cm_min <= mo.k_cm_max <= 1, "modulation: need 0 <= k_cm_min <= k_cm_max <= 1")
    need(mo.lr_floor >= 0, "modulation.lr_floor must be >= 0")
    need(0.0 <= t.momentum <= 1.0, "trainer.momentum must be in [0, 1]")
    need(t.lambda_fd >= 0, "trainer.lambda_fd must be >= 0")
    need(t.rcs_temperature > 0, "trainer.rcs_temperature must be > 0")
    need(t.confidence is None or 0 <= t.confidence <= 1, "trainer.confidence must be in [0, 1]")
    need(t.target_window >= 1 and t.source_batch >= 1, "trainer batch sizes must be >= 1")
    need(t.buffer_size >= s.classes, "trainer.buffer_size must be >= stream.classes")
    need(t.lr >= 0, "trainer.lr must be >= 0")
    need(0 <= t.k_cm_fixed <= 1, "trainer.k_cm_fixed must be in [0, 1]")
    need(e.cadence >= 1 and e.holdout_size >= 1, "eval.cadence/holdout_size must be >= 1")
    for name in ("alpha", "beta"):
        need(math.isfinite(getattr(h, name)), f"hamt.{name} must be finite")
