"""Run configuration: JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .allocator import DIRECTIONS
from .model import ConfigError, ModelConfig
from .scoring import VARIANTS
from .tasks import VerifiableTask
from .trainer import GrpoConfig, TrainConfig

OUTPUT_ROOT_ENV = "HYBRID_LORA_OUTPUT_ROOT"


@dataclass(frozen=True)
class Seeds:
    model: int = 0
    partition: int = 0
    sampling: int = 0
    lora: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rank: int = 16
    variant: str = "product"
    r_fft: float = 0.10
    partitions: int = 20
    score_batch_size: int = 16
    direction: str = "ascending-from-lora"
    seeds: Seeds = field(default_factory=Seeds)
    task: VerifiableTask = field(default_factory=VerifiableTask)
    train: TrainConfig = field(default_factory=TrainConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not isinstance(self.rank, int) or isinstance(self.rank, bool) or self.rank < 1:
            raise ConfigError("rank", f"must be a positive integer, got {self.rank!r}")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if not isinstance(self.r_fft, (int, float)) or not 0.0 < self.r_fft < 1.0:
            raise ConfigError("r_fft", f"must lie in (0, 1), got {self.r_fft!r}")
        if not isinstance(self.partitions, int) or self.partitions < 2:
            raise ConfigError("partitions", f"must be an integer >= 2, got {self.partitions!r}")
        if not isinstance(self.score_batch_size, int) or self.score_batch_size < 1:
            raise ConfigError("score_batch_size", "must be a positive integer")
        if self.direction not in DIRECTIONS:
            raise ConfigError("direction", f"must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.model.vocab_size < self.task.min_vocab():
            raise ConfigError("model.vocab_size", f"task needs at least {self.task.min_vocab()} tokens")
        if self.model.max_seq_len < self.task.max_seq_len():
            raise ConfigError("model.max_seq_len", f"task needs sequences of {self.task.max_seq_len()} tokens")
        if not self.out_dir:
            raise ConfigError("out_dir", "must be a non-empty path")

    def to_dict(self) -> dict:
        return asdict(self)

    def output_path(self) -> Path:
        p = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p


_SECTIONS = {"model": ModelConfig, "seeds": Seeds, "task": VerifiableTask, "train": TrainConfig, "grpo": GrpoConfig}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
        if value is None and key != "max_gen_len":
            raise ConfigError(key if prefix == "" else f"{prefix}.{key}", "is missing (null)")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(prefix, str(exc)) from None


def from_dict(data: dict) -> RunConfig:
    data = copy.deepcopy(data)
    known = {f.name for f in fields(RunConfig)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(key, "unknown field")
        if value is None:
            raise ConfigError(key, "is missing (null)")
    seeds = _build(Seeds, data.pop("seeds", {}), "seeds")
    model = dict(data.pop("model", {}))
    model["seed"] = seeds.model
    train = dict(data.pop("train", {}))
    train["seed"] = seeds.sampling
    parts = {
        "seeds": seeds,
        "model": _build(ModelConfig, model, "model"),
        "task": _build(VerifiableTask, data.pop("task", {}), "task"),
        "train": _build(TrainConfig, train, "train"),
        "grpo": _build(GrpoConfig, data.pop("grpo", {}), "grpo"),
    }
    try:
        return RunConfig(**parts, **data)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def apply_override(data: dict, assignment: str) -> None:
    """Set ``a.b=value`` in a nested dict; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.strip().split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        data = json.loads(p.read_text())
    for o in overrides:
        apply_override(data, o)
    return from_dict(data)
