"""Run configuration: one YAML document with optional sections

    seed: 0
    model:    {ModelConfig fields}
    training: {TrainingConfig fields}
    corpus:   {CorpusSpec fields}
    sampler:  {nfe, sway, solver, cfg, t_prime}
    paths:    {corpus, checkpoint, output}

Unknown keys anywhere are rejected.  Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import CorpusSpec
from .model import ModelConfig
from .sampler import EVALS_PER_SEGMENT, check_sway_coefficient
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class SamplerConfig:
    nfe: int = 32
    sway: float = -1.0
    solver: str = "euler"
    cfg: float = 2.0
    t_prime: float = 0.1

    def __post_init__(self):
        if self.solver not in EVALS_PER_SEGMENT:
            raise ConfigError(f"sampler.solver: unknown solver {self.solver!r}; expected one of {sorted(EVALS_PER_SEGMENT)}")
        if self.nfe < 1 or self.nfe % EVALS_PER_SEGMENT[self.solver]:
            raise ConfigError(f"sampler.nfe: {self.nfe} is not a positive multiple of {EVALS_PER_SEGMENT[self.solver]} for {self.solver}")
        try:
            check_sway_coefficient(self.sway)
        except ValueError as err:
            raise ConfigError(f"sampler.sway: {err}") from None
        if self.cfg < 0:
            raise ConfigError("sampler.cfg: guidance strength must be nonnegative")
        if not 0.0 < self.t_prime < 1.0:
            raise ConfigError("sampler.t_prime: must lie in (0, 1)")


@dataclass
class PathsConfig:
    corpus: str | None = None
    checkpoint: str | None = None
    output: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "corpus": asdict(self.corpus),
            "sampler": asdict(self.sampler),
            "paths": asdict(self.paths),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = {
    "model": ModelConfig,
    "training": TrainingConfig,
    "corpus": CorpusSpec,
    "sampler": SamplerConfig,
    "paths": PathsConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    parts = {name: _build(cls, data.get(name) or {}, name) for name, cls in SECTIONS.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    return RunConfig(seed=seed, **parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from None
    return from_dict(data)


def with_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted-key overrides such as ``{"sampler.nfe": 16}``; ``None``
    values are skipped.  Revalidates the result."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "seed":
            data["seed"] = value
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"bad override key {key!r}")
        data[section][name] = value
    return from_dict(data)
