"""
Run configuration: one dataclass per section, loaded from YAML.

Each section is a flat mapping of key: value pairs. Unknown sections or keys
are rejected, and values are coerced to the type of the field's default.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import yaml

from forceflow.common import ConfigError, ValidationError, config_hash
from forceflow.compliant_rollout import ComplianceSchedule, RolloutConfig
from forceflow.contact_sim import SimConfig, TaskConfig
from forceflow.demo_warp import GenerationContext, RandomizationRanges, WarpConfig
from forceflow.expert import ExpertConfig
from forceflow.flow_policy import PolicyArch, TrainConfig
from forceflow.pointcloud import NoiseConfig, ScannerConfig

logger = logging.getLogger(__name__)

THREADS_ENV = 'FORCEFLOW_THREADS'


@dataclass
class EvalConfig:
    grid_step: float = 0.04
    n_seeds: int = 3
    block_scale: float = 1.0

    def validate(self):
        if self.grid_step < 0.0 or self.n_seeds < 1 or self.block_scale <= 0.0:
            raise ConfigError("eval needs grid_step >= 0, n_seeds >= 1 and block_scale > 0")


@dataclass
class SeedConfig:
    master: int = 0

    def validate(self):
        if not 0 <= self.master < 2 ** 64:
            raise ConfigError("seeds.master must be an unsigned 64-bit integer")


@dataclass
class PathConfig:
    out: str = 'runs'


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    ranges: RandomizationRanges = field(default_factory=RandomizationRanges.planar)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    policy: PolicyArch = field(default_factory=PolicyArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ComplianceSchedule = field(default_factory=ComplianceSchedule)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def validate(self):
        for section in dataclasses.fields(self):
            value = getattr(self, section.name)
            validate = getattr(value, 'validate', None)
            if validate is None:
                continue
            try:
                validate()
            except ValidationError as e:
                raise ConfigError(f"[{section.name}] {e}") from e

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s.name: _section_to_dict(getattr(self, s.name)) for s in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'RunConfig':
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping of sections")
        defaults = cls()
        known = {s.name for s in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration sections: {', '.join(unknown)}")
        sections = {}
        for name in sorted(known):
            base = getattr(defaults, name)
            sections[name] = _section_from_dict(name, base, data.get(name) or {})
        config = cls(**sections)
        config.validate()
        return config

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def generation_context(self) -> GenerationContext:
        return GenerationContext(sim=self.sim, task=self.task, warp=self.warp, rollout=self.rollout,
                                 schedule=self.schedule, scanner=self.scanner, noise=self.noise,
                                 n_points=self.policy.n_points)


def _section_to_dict(section: Any) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(section):
        value = getattr(section, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        if len(default) and len(value) != len(default) and section != 'policy':
            raise ConfigError(f"{where} needs {len(default)} entries, got {len(value)}")
        kind = type(default[0]) if default else float
        return tuple(_coerce(section, key, kind(), v) for v in value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where} has unsupported type {type(default).__name__}")


def _section_from_dict(name: str, base: Any, values: Dict[str, Any]) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(base):
        default = getattr(base, f.name)
        kwargs[f.name] = _coerce(name, f.name, default, values[f.name]) if f.name in values else default
    return type(base)(**kwargs)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load a YAML config; defaults when path is None."""
    if path is None:
        return RunConfig.from_dict({})
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'r') as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    logger.debug("loaded configuration from %s", path)
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str):
    with open(path, 'w') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True, default_flow_style=False)


def worker_count() -> int:
    """FORCEFLOW_THREADS when set, otherwise the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == '':
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value
