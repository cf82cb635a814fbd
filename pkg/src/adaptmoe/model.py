"""A small pre-norm transformer whose every feed-forward block is an MoE layer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cost import CostReport, batch_cost, model_flops_per_token
from .data import Batch
from .moe import (
    TOP1, TOP1_WEIGHTS, Expert, GatingNetwork, LoadBalanceStats, MoELayerOutput, Routing,
    RoutingPolicy, load_balance_loss, moe_forward,
)
from .tensor import ContractError, Tensor

CHECKPOINT_FORMAT = 1
TASKS = ("causal_lm", "classification")
_MASKED = -1e9


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    intermediate: int = 128
    num_layers: int = 4
    num_experts: int = 8
    heads: int = 2
    policy: RoutingPolicy = field(default_factory=RoutingPolicy)
    balance_coeff: float = 0.01
    task: str = "causal_lm"
    max_seq_len: int = 64
    num_classes: int = 2
    top1_weight: str = "renormalized"

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = RoutingPolicy(**self.policy)
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.num_experts == 1 and self.policy.kind != "top1":
            raise ValueError("a single-expert (dense) model needs the top1 policy")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.top1_weight not in TOP1_WEIGHTS:
            raise ValueError(f"top1_weight must be one of {TOP1_WEIGHTS}")
        if self.balance_coeff < 0:
            raise ValueError("balance_coeff must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def output_size(self) -> int:
        return self.vocab_size if self.task == "causal_lm" else self.num_classes


class Model:
    """Parameters of the transformer, stored by name in creation order."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h = cfg.hidden
        p: dict[str, Tensor] = {}

        def uniform(shape, fan_in):
            return T.parameter(rng.uniform(-1, 1, shape) / math.sqrt(fan_in))

        p["tok_emb"] = T.parameter(rng.normal(0, 0.1, (cfg.vocab_size, h)))
        p["pos_emb"] = T.parameter(rng.normal(0, 0.1, (cfg.max_seq_len, h)))
        for i in range(cfg.num_layers):
            for name in ("ln1", "ln2"):
                p[f"l{i}.{name}.g"] = T.parameter(np.ones(h))
                p[f"l{i}.{name}.b"] = T.parameter(np.zeros(h))
            for name in ("wq", "wk", "wv", "wo"):
                p[f"l{i}.{name}"] = uniform((h, h), h)
            p[f"l{i}.gate"] = GatingNetwork.init(h, cfg.num_experts, rng).wg
            for e in range(cfg.num_experts):
                ex = Expert.init(h, cfg.intermediate, rng)
                p[f"l{i}.e{e}.w0"], p[f"l{i}.e{e}.w1"] = ex.w0, ex.w1
        p["lnf.g"] = T.parameter(np.ones(h))
        p["lnf.b"] = T.parameter(np.zeros(h))
        p["head"] = uniform((h, cfg.output_size), h)
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def experts(self, layer: int) -> list[Expert]:
        p = self.params
        return [Expert(p[f"l{layer}.e{e}.w0"], p[f"l{layer}.e{e}.w1"]) for e in range(self.cfg.num_experts)]

    def gate(self, layer: int) -> GatingNetwork:
        return GatingNetwork(self.params[f"l{layer}.gate"])

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


def _norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.layer_norm(x) * g + b


def attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | float = 0.0) -> Tensor:
    """Scaled dot-product attention over the last two axes; ``bias`` is added to the scores."""
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(q.shape[-1])) + bias
    return T.softmax(scores, axis=-1) @ v


def attention_forward(model: Model, layer: int, x: Tensor, mask: np.ndarray | None = None, causal: bool = True) -> Tensor:
    """Pre-norm multi-head self-attention with residual: ``x + attn(ln(x))``.

    ``x`` is ``(B, S, H)`` or a single ``(S, H)`` sequence; ``mask`` marks real
    (non-pad) key positions.
    """
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, s, h = x.shape
    if s > model.cfg.max_seq_len:
        raise ContractError(f"sequence length {s} exceeds max_seq_len {model.cfg.max_seq_len}")
    p = model.params
    nh = model.cfg.heads
    d = h // nh
    z = _norm(x, p[f"l{layer}.ln1.g"], p[f"l{layer}.ln1.b"])

    def heads(w):
        return (z @ p[f"l{layer}.{w}"]).reshape(b, s, nh, d).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    bias = np.zeros((b, 1, s, s))
    if causal:
        bias += np.triu(np.full((s, s), _MASKED), k=1)
    if mask is not None:
        bias += np.where(np.asarray(mask, dtype=bool), 0.0, _MASKED)[:, None, None, :]
    att = attend(q, k, v, bias)
    out = x + att.transpose(0, 2, 1, 3).reshape(b, s, h) @ p[f"l{layer}.wo"]
    return out.reshape(s, h) if single else out


@dataclass
class ForwardRecord:
    logits: Tensor
    layers: list[MoELayerOutput]
    token_index: np.ndarray  # flat (row * S + col) position of each routed token
    token_row: np.ndarray  # batch row of each routed token

    @property
    def routings(self) -> list[Routing]:
        return [layer.routing for layer in self.layers]

    @property
    def per_layer_top2_ratio(self) -> list[float]:
        return [layer.top2_ratio for layer in self.layers]

    @property
    def per_layer_stats(self) -> list[LoadBalanceStats]:
        return [layer.stats for layer in self.layers]

    @property
    def per_token_decisions(self):
        return [layer.decisions for layer in self.layers]

    def sample_top2_counts(self, batch_size: int) -> np.ndarray:
        """(batch_size, L) count of two-expert tokens per sample and layer."""
        return np.stack(
            [np.bincount(self.token_row, weights=r.is_top2, minlength=batch_size) for r in self.routings],
            axis=1,
        ).astype(np.int64)


def model_forward(
    model: Model,
    tokens: np.ndarray,
    mask: np.ndarray | None = None,
    policy: RoutingPolicy | None = None,
    frozen: Sequence[Routing] | None = None,
) -> ForwardRecord:
    """Run the network on a ``(B, S)`` batch of token ids.

    Pad positions (``mask`` False) never reach the gate. ``policy`` overrides the
    configured routing (e.g. forced top-1 at evaluation); ``frozen`` replays the
    per-layer routing of an earlier pass.
    """
    cfg = model.cfg
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.intp))
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")
    b, s = tokens.shape
    if s > cfg.max_seq_len:
        raise ContractError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    mask = np.ones((b, s), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    policy = policy or cfg.policy
    p = model.params
    h = cfg.hidden
    causal = cfg.task == "causal_lm"

    flat = np.flatnonzero(mask.reshape(-1))
    rows = flat // s
    x = p["tok_emb"][tokens] + p["pos_emb"][np.arange(s)]
    layers = []
    for i in range(cfg.num_layers):
        x = attention_forward(model, i, x, mask, causal)
        z = _norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"]).reshape(b * s, h)[flat]
        out = moe_forward(
            model.experts(i), model.gate(i), policy, z,
            frozen=None if frozen is None else frozen[i], top1_weight=cfg.top1_weight,
        )
        layers.append(out)
        x = x + T.index_add(b * s, flat, out.outputs).reshape(b, s, h)
    x = _norm(x, p["lnf.g"], p["lnf.b"])
    if causal:
        logits = x @ p["head"]
    else:
        logits = x[:, 0, :] @ p["head"]
    return ForwardRecord(logits, layers, flat, rows)


def task_loss(model: Model, record: ForwardRecord, batch: Batch) -> Tensor:
    if model.cfg.task == "causal_lm":
        if batch.targets.shape != record.logits.shape[:2]:
            raise ContractError(f"targets {batch.targets.shape} do not match logits {record.logits.shape}")
        return T.cross_entropy(record.logits, batch.targets, batch.mask)
    if batch.targets.shape != (record.logits.shape[0],):
        raise ContractError(f"class targets {batch.targets.shape} do not match batch {record.logits.shape[0]}")
    return T.cross_entropy(record.logits, batch.targets)


def total_loss(model: Model, record: ForwardRecord, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
    """(task + alpha * sum of layer balance losses, task loss, balance sum)."""
    task = task_loss(model, record, batch)
    aux = Tensor(0.0)
    for stats in record.per_layer_stats:
        aux = aux + load_balance_loss(stats)
    return task + aux * model.cfg.balance_coeff, task, aux


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: Model
    optimizer: Adam
    step: int = 0


@dataclass
class StepResult:
    loss: float
    task_loss: float
    aux_loss: float
    top2_ratios: list[float]
    cost: CostReport
    record: ForwardRecord


def batch_cost_for(model: Model, record: ForwardRecord, seq_len: int) -> CostReport:
    cfg = model.cfg
    other = model_flops_per_token(cfg.hidden, cfg.num_layers, cfg.num_experts, cfg.output_size, seq_len)
    return batch_cost(record.routings, cfg.hidden, cfg.intermediate, other_flops_per_token=other)


def train_step(state: TrainState, batch: Batch) -> StepResult:
    """Forward, backward, Adam update, zero grads."""
    model = state.model
    record = model_forward(model, batch.tokens, batch.mask)
    loss, task, aux = total_loss(model, record, batch)
    if not np.isfinite(loss.item()):
        raise TrainingError(
            f"non-finite loss at step {state.step + 1}: task={task.item()} aux={aux.item()}")
    model.zero_grad()
    loss.backward()
    state.optimizer.step()
    model.zero_grad()
    state.step += 1
    return StepResult(
        loss.item(), task.item(), aux.item(), record.per_layer_top2_ratio,
        batch_cost_for(model, record, batch.tokens.shape[1]), record,
    )


def evaluate(model: Model, batches: Sequence[Batch], policy: RoutingPolicy | None = None) -> dict:
    """Token-weighted (LM) or sample-weighted (classification) task loss over ``batches``."""
    total, weight, correct, top2, decisions = 0.0, 0.0, 0, 0, 0
    for batch in batches:
        record = model_forward(model, batch.tokens, batch.mask, policy=policy)
        loss = task_loss(model, record, batch).item()
        n = float(batch.mask.sum()) if model.cfg.task == "causal_lm" else float(len(batch))
        total += loss * n
        weight += n
        if model.cfg.task == "classification":
            correct += int((record.logits.data.argmax(axis=1) == batch.targets).sum())
        for r in record.routings:
            top2 += r.top2_count
            decisions += len(r)
    out = {"loss": total / weight if weight else float("nan"),
           "frac_top2": top2 / decisions if decisions else 0.0}
    if model.cfg.task == "classification":
        out["accuracy"] = correct / weight if weight else float("nan")
    return out


def eval_policy(cfg: ModelConfig, mode: str) -> RoutingPolicy:
    """Routing used at evaluation: ``train`` keeps the configured policy, ``top1`` forces one expert."""
    if mode == "train":
        return cfg.policy
    if mode == "top1":
        return TOP1
    raise ValueError(f"unknown evaluation routing {mode!r}")


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """``.npz`` with every parameter under its name plus ``__meta__`` (JSON).

    ``__meta__`` holds ``format`` (currently 1), the model ``config`` and any ``extra``.
    """
    meta = {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_dict(), "extra": extra or {}}
    arrays = {name: t.data for name, t in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        model = Model(ModelConfig(**meta["config"]))
        for name, t in model.params.items():
            if z[name].shape != t.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {z[name].shape}, expected {t.shape}")
            t.data = np.array(z[name], dtype=np.float64)
    return model, meta.get("extra", {})
