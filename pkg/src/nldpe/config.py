"""Experiment configuration: one TOML document, every section optional.

Sections::

    seed = 0

    [quant]        # QuantSpec override for compile-fn / simulate --pipeline fn
    [noise]        # NoiseSpec fields (prog, fluct, acam_transfer as [a, b, c])
    [pipeline]     # PipelineConfig fields plus workload shapes
    [naf]          # NafConfig fields
    [faults]       # random fault map: rate, high_fraction
    [costs]        # clock_ghz and optional [[costs.components]] tables

An experiment is fully determined by the config plus the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import tomli

from nldpe.codes import QuantSpec
from nldpe.costs import ComponentCosts
from nldpe.naf import NafConfig
from nldpe.noise import NoiseSpec
from nldpe.pipelines import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Shapes:
    """Workload sizes for the simulate subcommand."""
    pairs: int = 500          # mul: random operand pairs
    length: int = 256         # dot: vector length
    rows: int = 64            # matmul / crossbar tasks
    cols: int = 64
    softmax_len: int = 64
    softmax_trials: int = 20
    tokens: int = 4           # attention
    d_k: int = 8
    d_model: int = 8
    instances: int = 20
    fn_points: int = 1000     # fn: sweep points

    @classmethod
    def from_dict(cls, d: dict) -> "Shapes":
        return cls(**{k: int(d[k]) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class FaultConfig:
    rate: float = 0.0
    high_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0 or not 0.0 <= self.high_fraction <= 1.0:
            raise ConfigError("fault rate and high_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Config:
    seed: int = 0
    quant: Optional[QuantSpec] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    shapes: Shapes = field(default_factory=Shapes)
    naf: NafConfig = field(default_factory=NafConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    costs: ComponentCosts = field(default_factory=ComponentCosts)

    def with_overrides(self, seed: Optional[int] = None, noise_scale: Optional[float] = None) -> "Config":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), naf=replace(cfg.naf, seed=int(seed)))
        if noise_scale is not None:
            cfg = replace(cfg, noise=cfg.noise.with_(scale=float(noise_scale)))
        return replace(cfg, noise=cfg.noise.with_(seed=cfg.seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "quant": self.quant.to_dict() if self.quant else None,
            "noise": self.noise.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "shapes": dict(self.shapes.__dict__),
            "naf": self.naf.to_dict(),
            "faults": dict(self.faults.__dict__),
            "costs": self.costs.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def config_from_dict(d: dict) -> Config:
    known = {"seed", "quant", "noise", "pipeline", "naf", "faults", "costs"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        pipe = dict(d.get("pipeline", {}))
        seed = int(d.get("seed", 0))
        return Config(
            seed=seed,
            quant=QuantSpec.from_dict(d["quant"]) if d.get("quant") else None,
            noise=NoiseSpec.from_dict({"seed": seed, **d.get("noise", {})}),
            pipeline=PipelineConfig.from_dict(pipe),
            shapes=Shapes.from_dict(pipe),
            naf=NafConfig.from_dict({"seed": seed, **d.get("naf", {})}),
            faults=FaultConfig(**d.get("faults", {})),
            costs=ComponentCosts.from_dict(d.get("costs", {})),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from e


def loads(text: str) -> Config:
    try:
        return config_from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed TOML: {e}") from e


def load(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())
