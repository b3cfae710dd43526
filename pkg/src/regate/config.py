"""Experiment configuration: one JSON document, strictly validated.

Layout::

    {
      "mode": "regate" | "baseline" | "both",
      "seed": 0,
      "model":    {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len",
                   "tie_embeddings", "dtype", "init_std"},
      "task":     SyntheticTaskConfig fields,
      "schedule": {"cycle", "dense_prefix", "p_sparse", "warmup"},
      "score":    {"beta", "lam"},
      "optim":    {"kind": "sgd" | "adam", "lr"},
      "teacher":  {"max_steps", "batch_size", "lr", "target_loss", "eval_every"},
      "train":    {"batch_size", "n_steps", "eval_every", "log_every",
                   "match_label_budget", "max_steps", "loss_normalization",
                   "gate_prompt_tokens", "record_wall_clock"},
      "ablation_lambdas": [0.0, 0.5, 1.0]
    }

Every section is optional; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .data import SyntheticTaskConfig
from .model import ModelConfig
from .schedule import SparsitySchedule
from .scoring import ScoreConfig

MODES = ("baseline", "regate", "both")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 16
    tie_embeddings: bool = False
    dtype: str = "float32"
    init_std: float = 0.02

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError("optim.kind must be sgd or adam")
        if not self.lr > 0:
            raise ConfigError("optim.lr must be > 0")


@dataclass(frozen=True)
class TeacherConfig:
    max_steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    target_loss: float = 0.3
    eval_every: int = 100


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    n_steps: int = 400
    eval_every: int = 50
    log_every: int = 50
    match_label_budget: bool = False
    max_steps: int = 5000
    loss_normalization: str = "kept"
    gate_prompt_tokens: bool = False
    record_wall_clock: bool = True

    def __post_init__(self):
        if self.loss_normalization not in ("kept", "all"):
            raise ConfigError("train.loss_normalization must be kept or all")
        if self.batch_size < 1 or self.n_steps < 1:
            raise ConfigError("train.batch_size and train.n_steps must be >= 1")


_SECTIONS = {
    "model": ModelSection,
    "task": SyntheticTaskConfig,
    "schedule": SparsitySchedule,
    "score": ScoreConfig,
    "optim": OptimConfig,
    "teacher": TeacherConfig,
    "train": TrainConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "both"
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    schedule: SparsitySchedule = field(default_factory=SparsitySchedule)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation_lambdas: tuple[float, ...] = (0.0, 0.5, 1.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.model.max_seq_len < self.task.seq_len:
            raise ConfigError(f"model.max_seq_len {self.model.max_seq_len} < task sequence length {self.task.seq_len}")

    @property
    def dtype(self):
        return np.dtype(self.model.dtype)

    def model_config(self) -> ModelConfig:
        vocab = self.task.vocab
        m = self.model
        return ModelConfig(n_layers=m.n_layers, n_heads=m.n_heads, d_model=m.d_model, d_ff=m.d_ff,
                           vocab_size=vocab.vocab_size, max_seq_len=m.max_seq_len,
                           visual_id_range=vocab.visual_id_range, pad_id=vocab.pad_id,
                           bos_id=vocab.bos_id, tie_embeddings=m.tie_embeddings)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation_lambdas"] = list(self.ablation_lambdas)
        return d

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _build_section(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "ablation_lambdas":
            if not isinstance(value, list) or not all(isinstance(v, (int, float)) and v >= 0 for v in value):
                raise ConfigError("ablation_lambdas must be a list of non-negative numbers")
            kwargs[key] = tuple(float(v) for v in value)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides to a raw config dict (values parsed as JSON)."""
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a non-object")
        node[keys[-1]] = _parse_value(text)
    return out


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        raw["seed"] = seed
        raw.setdefault("task", {})["seed"] = seed
    return config_from_dict(raw)
