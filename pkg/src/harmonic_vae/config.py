"""Experiment and sweep configuration files (JSON with a fixed key set).

Every section maps onto a frozen dataclass.  Unknown keys are rejected so a
typo cannot silently fall back to a default.  See README.md for the full key
list.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import KINDS
from .vae import DEFAULT_LIKELIHOOD_SCALE, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "sinc"
    size: int | None = None
    seed: int = 0
    normalized_sinc: bool = True
    include_coordinate: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"dataset.kind must be one of {KINDS}, got {self.kind!r}")
        if self.size is not None and self.size < 2:
            raise ConfigError("dataset.size must be at least 2")


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (256, 256, 256)
    activation: str = "sigmoid"
    latent_dim: int = 1
    likelihood_scale: float = DEFAULT_LIKELIHOOD_SCALE

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("sigmoid", "tanh", "relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.latent_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer sizes must be positive")
        if self.likelihood_scale <= 0:
            raise ConfigError("model.likelihood_scale must be positive")


@dataclass(frozen=True)
class AttackSpec:
    C_grid: tuple[float, ...] = (0.5, 1.0, 2.0)
    steps: int = 100
    step_size: float | None = None
    restarts: int = 5
    n_points: int = 25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "C_grid", tuple(float(c) for c in self.C_grid))
        if any(c < 0 for c in self.C_grid) or not self.C_grid:
            raise ConfigError("attack.C_grid must be a non-empty list of non-negative norms")
        if self.steps < 1 or self.restarts < 1 or self.n_points < 1:
            raise ConfigError("attack steps, restarts and n_points must be positive")


@dataclass(frozen=True)
class AnalysisSpec:
    spectra: bool = True
    cutoff: float | None = None  # None means a quarter of the Nyquist frequency
    detrend: str = "none"
    k_max: int = 20
    cv_splits: int = 10
    cv_seed: int = 0
    lipschitz: bool = True
    lipschitz_samples: int = 1000
    lipschitz_seed: int = 0
    variance_samples: int = 10_000  # 0 skips the variance certificate
    variance_seed: int = 0
    hermite_degree: int = 0  # 0 skips the Hermite decomposition
    hermite_points: int = 3
    attack: AttackSpec | None = None

    def __post_init__(self):
        if self.detrend not in ("none", "endpoints"):
            raise ConfigError("analysis.detrend must be 'none' or 'endpoints'")
        if self.k_max < 0 or self.cv_splits < 1:
            raise ConfigError("analysis.k_max must be >= 0 and cv_splits >= 1")
        if self.cutoff is not None and self.cutoff < 0:
            raise ConfigError("analysis.cutoff must be non-negative")
        if self.variance_samples == 1 or self.variance_samples < 0:
            raise ConfigError("analysis.variance_samples must be 0 or at least 2")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    output_dir: str = "runs/experiment"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    def config_hash(self) -> str:
        """SHA-256 of everything that determines the results (output_dir excluded)."""
        body = self.to_dict()
        body.pop("output_dir")
        return _digest(body)

    def training_hash(self) -> str:
        """SHA-256 of the sections that determine the trained model."""
        body = self.to_dict()
        return _digest({k: body[k] for k in ("dataset", "model", "train")})

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-path overrides such as {"train.beta": 4}."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"cannot override {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown key in override {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


_NESTED = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "train": TrainConfig,
    "analysis": AnalysisSpec,
    "attack": AttackSpec,
}


def _digest(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigError("configs cannot hold non-finite numbers")
    return obj


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(k)
        if sub is not None and v is not None:
            v = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class SweepConfig:
    """A base experiment crossed with a grid of overrides and a list of training seeds."""

    base: ExperimentConfig
    grid: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    name: str = "sweep"
    output_dir: str = "runs/sweep"

    def __post_init__(self):
        for key, values in self.grid.items():
            if key.startswith("dataset."):
                raise ConfigError("sweeps may not vary the dataset; reports must share one dataset")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"grid entry {key!r} needs a non-empty list")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        allowed = {"base", "grid", "seeds", "name", "output_dir"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown key(s) in sweep: {', '.join(unknown)}")
        if "base" not in d:
            raise ConfigError("sweep needs a 'base' experiment")
        kwargs = dict(d)
        kwargs["base"] = ExperimentConfig.from_dict(d["base"])
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {"name": self.name, "base": self.base.to_dict(), "grid": _plain(self.grid),
                "seeds": list(self.seeds), "output_dir": self.output_dir}

    def entries(self) -> list[tuple[dict, ExperimentConfig]]:
        """(grid point, config) pairs, one per grid combination and seed."""
        keys = sorted(self.grid)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            point = dict(zip(keys, combo))
            for seed in self.seeds:
                tag = "__".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())
                name = f"{self.name}__{tag}__seed={seed}" if tag else f"{self.name}__seed={seed}"
                cfg = self.base.with_overrides({**point, "train.seed": seed})
                cfg = replace(cfg, name=name, output_dir=str(Path(self.output_dir) / name))
                out.append((point, cfg))
        return out


def load_config(path) -> ExperimentConfig | SweepConfig:
    """Read a JSON experiment or sweep config (a sweep has a 'base' key)."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(d, dict) and "base" in d:
        return SweepConfig.from_dict(d)
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig | SweepConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
