"""Pipeline configuration: one YAML file with a block per stage.

Block seeds are not configurable on their own; every stage takes the
top-level ``seed`` so a single number pins the whole run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .fixtures import FixtureSpec
from .generator import GeneratorConfig
from .grounder import GrounderConfig
from .normalize import FilterConfig
from .tagger import SchemeTaggerConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    nli_threshold: float = 0.8
    bleu_epsilon: float = 1e-9
    bleu_max_order: int = 4
    embedding: str = "hashing"
    embedding_width: int = 256

    def __post_init__(self):
        if not 0.0 <= self.nli_threshold <= 1.0:
            raise ValueError("nli_threshold must be in [0, 1]")
        if self.embedding not in ("hashing", "sentence-transformers"):
            raise ValueError(f"unknown embedding provider {self.embedding!r}")


BLOCKS = {
    "fixture": FixtureSpec,
    "grounder": GrounderConfig,
    "tagger": SchemeTaggerConfig,
    "filter": FilterConfig,
    "generator": GeneratorConfig,
    "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    fixture: FixtureSpec = field(default_factory=FixtureSpec)
    grounder: GrounderConfig = field(default_factory=GrounderConfig)
    tagger: SchemeTaggerConfig = field(default_factory=SchemeTaggerConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # the top-level seed is authoritative
        for name in BLOCKS:
            block = getattr(self, name)
            if hasattr(block, "seed") and block.seed != self.seed:
                setattr(self, name, replace(block, seed=self.seed))

    def with_seed(self, seed: int) -> "PipelineConfig":
        return from_dict({**to_dict(self), "seed": seed})

    def block_dict(self, name: str) -> dict:
        return to_dict(self)[name]

    def digest(self, *blocks: str) -> str:
        """Hash of the seed plus the named blocks (all blocks if none given)."""
        d = to_dict(self)
        chosen = {"seed": d["seed"], **{b: d[b] for b in (blocks or BLOCKS)}}
        return hashlib.sha256(json.dumps(chosen, sort_keys=True).encode()).hexdigest()


def to_dict(cfg: PipelineConfig) -> dict:
    out: dict = {"seed": cfg.seed}
    for name in BLOCKS:
        d = asdict(getattr(cfg, name))
        d.pop("seed", None)
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out


def from_dict(data: dict | None) -> PipelineConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - {"seed", *BLOCKS})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    kwargs = {"seed": seed}
    for name, cls in BLOCKS.items():
        block = data.get(name)
        if block is None:
            block = {}
        if not isinstance(block, dict):
            raise ConfigError(f"block {name!r} must be a mapping")
        allowed = {f.name for f in fields(cls)} - {"seed"}
        bad = sorted(set(block) - allowed)
        if bad:
            hint = " (use the top-level seed)" if "seed" in bad else ""
            raise ConfigError(f"unknown keys in {name!r}: {', '.join(bad)}{hint}")
        try:
            kwargs[name] = cls(**block, **({"seed": seed} if "seed" in {f.name for f in fields(cls)} else {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {name!r} block: {e}") from e
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)
