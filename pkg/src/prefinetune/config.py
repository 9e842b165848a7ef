"""Run configuration, read from and written to TOML."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .losses import R3FConfig
from .model import ModelConfig

OUTPUT_ROOT_ENV = "PREFINETUNE_OUTPUT_ROOT"


@dataclass(frozen=True)
class JsonlTask:
    task_id: str
    family: str
    train: str
    eval: str
    num_labels: int = 0


@dataclass(frozen=True)
class SuiteConfig:
    """Synthetic task suite plus optional JSONL-backed tasks."""

    n_classification: int = 14
    n_mrc: int = 3
    n_commonsense: int = 3
    n_summarization: int = 0
    train_min: int = 100
    train_max: int = 200
    eval_size: int = 100
    latent_seed: int = 0
    n_groups: int = 6
    probes: tuple[str, ...] = ()
    jsonl: tuple[JsonlTask, ...] = ()


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 40
    batch_size: int = 16
    warmup_steps: int = 4
    lrs: tuple[float, ...] = (1e-3, 3e-3, 1e-2)
    dropouts: tuple[float, ...] = (0.0, 0.1)
    eval_every: int = 0
    eval_limit: int = 200
    reuse_head: bool = True


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    scale_sizes: tuple[int, ...] = (0, 2, 5, 10, 20)
    n_probes: int = 5
    fractions: tuple[float, ...] = ()
    target_accuracy: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    r3f: R3FConfig = field(default_factory=R3FConfig)
    r3f_enabled: bool = True
    strategy: str = "batch_heterogeneous"
    worker_count: int = 8
    batch_size: int = 8
    steps: int = 400
    lr: float = 3e-3
    warmup_steps: int = 40
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_by_examples: bool = False
    eval_every: int = 0
    eval_limit: int = 200
    divergence_threshold: float = 1e3
    seed: int = 0
    output_dir: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return _strip_none(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(tomli_w.dumps(self.to_dict()).encode()).hexdigest()


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


def _build(cls, data: dict | None):
    if data is None:
        return cls()
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, val in data.items():
        if cls is SuiteConfig and name == "jsonl":
            val = tuple(JsonlTask(**t) for t in val)
        elif isinstance(val, list):
            val = tuple(val)
        kwargs[name] = val
    return cls(**kwargs)


_NESTED = {
    "model": ModelConfig,
    "suite": SuiteConfig,
    "finetune": FinetuneConfig,
    "ablation": AblationConfig,
    "r3f": R3FConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {name: _build(cls, data.pop(name, None)) for name, cls in _NESTED.items()}
    known = {f.name for f in fields(RunConfig)} - set(_NESTED)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs.update(data)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    """Load a TOML run config, or the ``config`` table of a run manifest."""
    with open(path, "rb") as f:
        data = tomllib.load(f)
    if "manifest" in data:
        data = data["config"]
    return config_from_dict(data)


def dump_config(config: RunConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def output_root(config: RunConfig | None = None) -> Path:
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
