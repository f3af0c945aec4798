"""Experiment configuration: TOML parsing, presets, validation, serialization."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import BASELINE_NAMES
from .model import BoundaryDims, CsiDims
from .optim import AdamConfig, OptimizerError
from .pipeline import PipelineConfig, StageCostModel
from .protocol import FleetConfig

ALGORITHMS = ("csilocal",) + BASELINE_NAMES

TAIL_LAYER_COUNT = 9


class ConfigError(Exception):
    pass


@dataclass
class FleetSection:
    n_ues: int = 10
    samples_per_ue: int = 13000
    batch_size: int = 800
    iterations: int = 20000


@dataclass
class ModelSection:
    n_t: int = 32
    n_c: int = 32


@dataclass
class BoundarySection:
    c1: int = 256
    c2: int = 256


@dataclass
class AdamSection:
    learning_rate: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8


@dataclass
class PipelineSection:
    enabled: bool = True
    stages: int = 2
    micro_batches: int = 2
    forward_cost: float = 1.0
    backward_cost: float = 1.0
    transfer_cost: float = 0.0


@dataclass
class DataSection:
    source: str = "generate"        # generate | file
    path: str = ""
    environment: str = "indoor"     # indoor | outdoor | noniid
    test_samples_per_ue: int = 2000


@dataclass
class BaselineSection:
    mu: float = 0.01
    local_steps: int = 1


@dataclass
class EvalSection:
    cadence: int = 50


@dataclass
class OutputSection:
    directory: str = "runs"
    figures: bool = True


@dataclass
class ExperimentConfig:
    algorithm: str = "csilocal"
    seed: int = 0
    fleet: FleetSection = field(default_factory=FleetSection)
    model: ModelSection = field(default_factory=ModelSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)
    adam: AdamSection = field(default_factory=AdamSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    data: DataSection = field(default_factory=DataSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ---- typed views used by the trainers ----

    def csi_dims(self) -> CsiDims:
        return CsiDims(self.model.n_t, self.model.n_c)

    def boundary_dims(self) -> BoundaryDims:
        return BoundaryDims(self.boundary.c1, self.boundary.c2)

    def fleet_config(self) -> FleetConfig:
        return FleetConfig(self.fleet.n_ues, self.fleet.samples_per_ue,
                           self.fleet.batch_size, self.fleet.iterations,
                           self.boundary_dims(), self.seed)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(self.adam.learning_rate, self.adam.beta1,
                          self.adam.beta2, self.adam.eps)

    def pipeline_config(self) -> PipelineConfig:
        cost = StageCostModel(self.pipeline.forward_cost, self.pipeline.backward_cost,
                              self.pipeline.transfer_cost)
        return PipelineConfig(self.pipeline.stages, self.pipeline.micro_batches,
                              self.pipeline.enabled, cost)


# Desk-scale presets are first-class named configs so the reproduction
# experiments are one command each. "paper" keeps the full-scale defaults.
PRESETS: dict[str, dict[str, Any]] = {
    "paper": {},
    "desk-small": {
        "fleet.n_ues": 2, "fleet.samples_per_ue": 256, "fleet.batch_size": 16,
        "fleet.iterations": 500, "model.n_t": 8, "model.n_c": 8,
        "boundary.c1": 32, "boundary.c2": 32, "adam.learning_rate": 1e-3,
        "data.environment": "indoor", "data.test_samples_per_ue": 64,
        "eval.cadence": 50,
    },
    "desk-indoor": {
        "fleet.n_ues": 4, "fleet.samples_per_ue": 512, "fleet.batch_size": 32,
        "fleet.iterations": 300, "model.n_t": 16, "model.n_c": 16,
        "boundary.c1": 32, "boundary.c2": 32, "adam.learning_rate": 1e-3,
        "data.environment": "indoor", "data.test_samples_per_ue": 128,
        "eval.cadence": 25,
    },
    "desk-outdoor": {
        "fleet.n_ues": 4, "fleet.samples_per_ue": 512, "fleet.batch_size": 32,
        "fleet.iterations": 300, "model.n_t": 16, "model.n_c": 16,
        "boundary.c1": 32, "boundary.c2": 32, "adam.learning_rate": 1e-3,
        "data.environment": "outdoor", "data.test_samples_per_ue": 128,
        "eval.cadence": 25,
    },
    "desk-noniid": {
        "fleet.n_ues": 10, "fleet.samples_per_ue": 1300, "fleet.batch_size": 32,
        "fleet.iterations": 400, "model.n_t": 8, "model.n_c": 8,
        "boundary.c1": 32, "boundary.c2": 32, "adam.learning_rate": 1e-3,
        "data.environment": "noniid", "data.test_samples_per_ue": 130,
        "eval.cadence": 50,
    },
}

_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)
             if f.name not in ("algorithm", "seed")}


def _set_key(cfg: ExperimentConfig, dotted: str, value) -> None:
    if dotted in ("algorithm", "seed"):
        expected = str if dotted == "algorithm" else int
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected {expected.__name__}, got {value!r}")
        setattr(cfg, dotted, value)
        return
    if "." not in dotted:
        raise ConfigError(f"unknown key '{dotted}'")
    section, key = dotted.split(".", 1)
    if not hasattr(cfg, section) or section in ("algorithm", "seed"):
        raise ConfigError(f"unknown section '{section}'")
    target = getattr(cfg, section)
    if not hasattr(target, key):
        raise ConfigError(f"unknown key '{section}.{key}'")
    current = getattr(target, key)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected bool, got {value!r}")
    elif isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected int, got {value!r}")
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected float, got {value!r}")
        value = float(value)
    elif isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{dotted}: expected string, got {value!r}")
    setattr(target, key, value)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> None:
    for dotted, value in overrides.items():
        _set_key(cfg, dotted, value)


def parse_config(path: Optional[str] = None, preset: Optional[str] = None,
                 overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """Defaults <- preset <- config file <- explicit overrides, then validate."""
    cfg = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (have: {', '.join(sorted(PRESETS))})")
        apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
        for key, value in doc.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    _set_key(cfg, f"{key}.{sub}", v)
            else:
                _set_key(cfg, key, value)
    if overrides:
        apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    def bad(field_name: str, why: str):
        raise ConfigError(f"{field_name}: {why}")

    if cfg.algorithm not in ALGORITHMS:
        bad("algorithm", f"'{cfg.algorithm}' is not one of {', '.join(ALGORITHMS)}")
    if cfg.seed < 0:
        bad("seed", "must be non-negative")
    f = cfg.fleet
    if f.n_ues < 1:
        bad("fleet.n_ues", "must be >= 1")
    if f.batch_size < 1:
        bad("fleet.batch_size", "must be >= 1")
    if f.batch_size > f.samples_per_ue:
        bad("fleet.batch_size", f"{f.batch_size} exceeds fleet.samples_per_ue={f.samples_per_ue}")
    if f.iterations < 1:
        bad("fleet.iterations", "must be >= 1")
    if cfg.model.n_t < 1 or cfg.model.n_c < 1:
        bad("model.n_t/n_c", "must be >= 1")
    if cfg.boundary.c1 < 1 or cfg.boundary.c2 < 1:
        bad("boundary.c1/c2", "must be >= 1")
    try:
        cfg.adam_config()
    except OptimizerError as exc:
        bad("adam", str(exc))
    p = cfg.pipeline
    if not (1 <= p.stages <= TAIL_LAYER_COUNT):
        bad("pipeline.stages", f"must be in [1, {TAIL_LAYER_COUNT}]")
    if p.micro_batches < 1:
        bad("pipeline.micro_batches", "must be >= 1")
    if p.enabled and p.micro_batches > f.n_ues * f.batch_size:
        bad("pipeline.micro_batches",
            f"{p.micro_batches} exceeds the accumulated batch of {f.n_ues * f.batch_size} rows")
    if min(p.forward_cost, p.backward_cost, p.transfer_cost) < 0:
        bad("pipeline costs", "must be >= 0")
    d = cfg.data
    if d.source not in ("generate", "file"):
        bad("data.source", f"'{d.source}' is not 'generate' or 'file'")
    if d.source == "file" and not d.path:
        bad("data.path", "required when data.source = 'file'")
    if d.environment not in ("indoor", "outdoor", "noniid"):
        bad("data.environment", f"'{d.environment}' is not indoor/outdoor/noniid")
    if d.source == "generate" and d.environment == "noniid" and f.n_ues != 10:
        bad("fleet.n_ues", "the built-in non-IID mixture table defines 10 UEs")
    if d.test_samples_per_ue < 1:
        bad("data.test_samples_per_ue", "must be >= 1")
    if cfg.eval.cadence < 1:
        bad("eval.cadence", "must be >= 1")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_config(cfg: ExperimentConfig) -> str:
    """Deterministic TOML rendering; parse(serialize(c)) == c."""
    lines = [f"algorithm = {_toml_value(cfg.algorithm)}", f"seed = {cfg.seed}"]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for fld in fields(obj):
            lines.append(f"{fld.name} = {_toml_value(getattr(obj, fld.name))}")
    return "\n".join(lines) + "\n"
