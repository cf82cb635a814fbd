"""Run configuration: a flat JSON object, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import TASKS, ModelConfig
from .moe import GAP_MODES, POLICIES, TOP1_WEIGHTS, RoutingPolicy

EVAL_POLICIES = ("train", "top1")
METRIC_FORMATS = ("csv", "jsonl")


class ConfigError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(f"config field {name!r}: {message}")
        self.field = name


@dataclass
class RunConfig:
    train_path: str = ""
    val_path: str = ""
    output_dir: str = "runs/default"
    task: str = "causal_lm"
    seed: int = 0
    epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    curriculum: bool = True
    anchor_by: str = "count"
    policy: str = "adaptive"
    threshold: float = 0.1
    gap: str = "pair"
    top1_weight: str = "renormalized"
    eval_policy: str = "train"
    hidden: int = 64
    intermediate: int = 128
    num_layers: int = 4
    num_experts: int = 8
    heads: int = 2
    balance_coeff: float = 0.01
    max_seq_len: int = 64
    eval_every: int = 50
    max_steps: int = 0  # 0 means no cap
    metrics_format: str = "csv"
    cost_form: str = "straggler"
    save_routing: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            expected = {"int": int, "float": (int, float), "bool": bool, "str": str}[f.type]
            if isinstance(value, bool) and f.type != "bool":
                raise ConfigError(f.name, f"expected {f.type}, got bool")
            if not isinstance(value, expected):
                raise ConfigError(f.name, f"expected {f.type}, got {type(value).__name__}")
        if not self.train_path:
            raise ConfigError("train_path", "required")
        choices = {
            "task": TASKS, "policy": POLICIES, "gap": GAP_MODES, "top1_weight": TOP1_WEIGHTS,
            "eval_policy": EVAL_POLICIES, "metrics_format": METRIC_FORMATS,
            "anchor_by": ("count", "mean_ratio"), "cost_form": ("straggler", "affine"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        positive = ("batch_size", "hidden", "intermediate", "num_layers", "num_experts", "heads",
                    "max_seq_len", "eval_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("epochs", "max_steps", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold", "must lie in [0, 1]")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if self.balance_coeff < 0:
            raise ConfigError("balance_coeff", "must be >= 0")
        if self.hidden % self.heads:
            raise ConfigError("heads", f"must divide hidden ({self.hidden})")
        if self.num_experts == 1 and self.policy != "top1":
            raise ConfigError("policy", "a single-expert (dense) model needs policy 'top1'")

    @property
    def routing_policy(self) -> RoutingPolicy:
        return RoutingPolicy(self.policy, self.threshold, self.gap)

    def model_config(self, vocab_size: int, num_classes: int = 2) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, hidden=self.hidden, intermediate=self.intermediate,
            num_layers=self.num_layers, num_experts=self.num_experts, heads=self.heads,
            policy=self.routing_policy, balance_coeff=self.balance_coeff, task=self.task,
            max_seq_len=self.max_seq_len, num_classes=num_classes, top1_weight=self.top1_weight,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        return cls(**data)

    @classmethod
    def load(cls, path) -> RunConfig:
        """Read a JSON config; corpus paths resolve relative to the file's directory."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("<file>", "top level must be an object")
        cfg = cls.from_dict(data)
        for name in ("train_path", "val_path", "output_dir"):
            value = getattr(cfg, name)
            if value and not Path(value).is_absolute():
                setattr(cfg, name, str((path.parent / value).resolve()))
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
