"""Experts, gating, top-1 / top-2 / adaptive routing and the balance loss.

Routing is decided in numpy (it is discrete); everything that carries a
gradient (gate probabilities, combine weights, expert outputs) stays on the
autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, concat, index_add, matmul, parameter, relu, softmax

POLICIES = ("top1", "top2", "adaptive")
GAP_MODES = ("pair", "raw")
TOP1_WEIGHTS = ("renormalized", "raw")


@dataclass(frozen=True)
class RoutingPolicy:
    """How many experts a token gets.

    ``gap="pair"`` compares ``(p1 - p2) / (p1 + p2)`` with the threshold,
    ``gap="raw"`` compares ``p1 - p2``. A token goes to two experts when the gap
    is ``<= threshold``.
    """

    kind: str = "adaptive"
    threshold: float = 0.1
    gap: str = "pair"

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown routing policy {self.kind!r}; expected one of {POLICIES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.gap not in GAP_MODES:
            raise ValueError(f"unknown gap mode {self.gap!r}; expected one of {GAP_MODES}")


TOP1 = RoutingPolicy("top1")
TOP2 = RoutingPolicy("top2")


@dataclass
class Expert:
    w0: Tensor  # hidden x intermediate
    w1: Tensor  # intermediate x hidden

    @classmethod
    def init(cls, hidden: int, intermediate: int, rng: np.random.Generator) -> Expert:
        return cls(
            parameter(rng.uniform(-1, 1, (hidden, intermediate)) / math.sqrt(hidden)),
            parameter(rng.uniform(-1, 1, (intermediate, hidden)) / math.sqrt(intermediate)),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w0, self.w1]


@dataclass
class GatingNetwork:
    wg: Tensor  # hidden x E

    @classmethod
    def init(cls, hidden: int, num_experts: int, rng: np.random.Generator) -> GatingNetwork:
        return cls(parameter(rng.uniform(-1, 1, (hidden, num_experts)) / math.sqrt(hidden)))

    @property
    def num_experts(self) -> int:
        return self.wg.shape[1]


@dataclass(frozen=True)
class GatingDecision:
    expert_ids: tuple[int, ...]
    weights: tuple[float, ...]
    full_probs: np.ndarray

    @property
    def is_top2(self) -> bool:
        return len(self.expert_ids) == 2


@dataclass
class LoadBalanceStats:
    """Per-layer routing statistics feeding the balance loss.

    ``f1`` counts only tokens that were routed to a single expert; ``p`` is the
    mean gate probability over every token and may be a graph tensor.
    """

    f1: np.ndarray
    p: Tensor
    num_experts: int
    top1_token_count: int


@dataclass
class Routing:
    """Columnar routing table for a batch of tokens.

    ``first`` is the argmax expert, ``second`` the runner-up (defined for every
    token, used only where ``is_top2``).
    """

    first: np.ndarray
    second: np.ndarray
    is_top2: np.ndarray

    def __len__(self) -> int:
        return len(self.first)

    @property
    def top2_count(self) -> int:
        return int(self.is_top2.sum())

    @property
    def top1_count(self) -> int:
        return len(self) - self.top2_count

    @property
    def invocations(self) -> int:
        return self.top1_count + 2 * self.top2_count


@dataclass
class MoELayerOutput:
    outputs: Tensor
    routing: Routing
    probs: Tensor
    weights: Tensor  # tokens x 2, combine weight per slot (slot 1 is 0 for top-1 tokens)
    stats: LoadBalanceStats

    @property
    def top2_ratio(self) -> float:
        n = len(self.routing)
        return self.routing.top2_count / n if n else 0.0

    @property
    def decisions(self) -> list[GatingDecision]:
        return [self.decision(i) for i in range(len(self.routing))]

    def decision(self, i: int) -> GatingDecision:
        r, w = self.routing, self.weights.data
        if r.is_top2[i]:
            ids, ws = (int(r.first[i]), int(r.second[i])), (w[i, 0], w[i, 1])
        else:
            ids, ws = (int(r.first[i]),), (w[i, 0],)
        return GatingDecision(ids, ws, self.probs.data[i].copy())


def expert_forward(expert: Expert, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != expert.w0.shape[0]:
        raise DimensionError(f"expert expects (tokens, {expert.w0.shape[0]}) input, got {x.shape}")
    return matmul(relu(matmul(x, expert.w0)), expert.w1)


def gate_probabilities(gate: GatingNetwork, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != gate.wg.shape[0]:
        raise DimensionError(f"gate expects (tokens, {gate.wg.shape[0]}) input, got {x.shape}")
    return softmax(matmul(x, gate.wg), axis=1)


def _gap(p1, p2, mode: str):
    if mode == "raw":
        return p1 - p2
    return (p1 - p2) / (p1 + p2)


def select_experts(probs, policy: RoutingPolicy, top1_weight: str = "renormalized") -> GatingDecision:
    """Route one token given its gate probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
        raise ContractError("select_experts needs a probability vector summing to 1")
    order = np.argsort(-probs, kind="stable")
    i = int(order[0])
    if len(probs) == 1:
        return GatingDecision((i,), (1.0,), probs)
    j = int(order[1])
    p1, p2 = probs[i], probs[j]
    two = policy.kind == "top2" or (
        policy.kind == "adaptive" and _gap(p1, p2, policy.gap) <= policy.threshold)
    if two:
        s = p1 + p2
        return GatingDecision((i, j), (p1 / s, p2 / s), probs)
    return GatingDecision((i,), (1.0 if top1_weight == "renormalized" else p1,), probs)


def route(probs: np.ndarray, policy: RoutingPolicy) -> Routing:
    """Vectorised :func:`select_experts` over rows of ``probs``."""
    n, e = probs.shape
    if e == 1:
        zeros = np.zeros(n, dtype=np.intp)
        return Routing(zeros, zeros, np.zeros(n, dtype=bool))
    order = np.argsort(-probs, axis=1, kind="stable")
    first, second = order[:, 0], order[:, 1]
    rows = np.arange(n)
    if policy.kind == "top1":
        is_top2 = np.zeros(n, dtype=bool)
    elif policy.kind == "top2":
        is_top2 = np.ones(n, dtype=bool)
    else:
        is_top2 = _gap(probs[rows, first], probs[rows, second], policy.gap) <= policy.threshold
    return Routing(first, second, is_top2)


def combine(weights: Sequence, expert_outputs: Sequence[Tensor]) -> Tensor:
    """Weighted sum of the selected experts' outputs for one token."""
    if len(weights) != len(expert_outputs):
        raise ContractError(
            f"combine got {len(weights)} weights for {len(expert_outputs)} expert outputs")
    out = None
    for w, y in zip(weights, expert_outputs):
        term = y * w
        out = term if out is None else out + term
    return out


def make_stats(routing: Routing, probs: Tensor) -> LoadBalanceStats:
    e = probs.shape[1]
    single = ~routing.is_top2
    count = int(single.sum())
    f1 = np.zeros(e)
    if count:
        f1 = np.bincount(routing.first[single], minlength=e) / count
    return LoadBalanceStats(f1, probs.mean(axis=0), e, count)


def load_balance_loss(stats: LoadBalanceStats) -> Tensor:
    """``E * sum_e f1[e] * p[e]``, zero when no token was routed top-1."""
    if stats.top1_token_count == 0:
        return Tensor(0.0)
    p = stats.p if isinstance(stats.p, Tensor) else Tensor(stats.p)
    return (p * np.asarray(stats.f1, dtype=np.float64)).sum() * float(stats.num_experts)


def moe_forward(
    experts: Sequence[Expert],
    gate: GatingNetwork,
    policy: RoutingPolicy,
    x: Tensor,
    frozen: Routing | None = None,
    top1_weight: str = "renormalized",
) -> MoELayerOutput:
    """Route every row of ``x`` and combine the selected experts' outputs.

    ``frozen`` reuses a previous routing table instead of deciding afresh; the
    combine weights are still recomputed from the current gate probabilities.
    """
    if len(experts) != gate.num_experts:
        raise ContractError(f"{len(experts)} experts but gate has {gate.num_experts} columns")
    probs = gate_probabilities(gate, x)
    n = x.shape[0]
    routing = route(probs.data, policy) if frozen is None else frozen
    if len(routing) != n:
        raise ContractError(f"frozen routing covers {len(routing)} tokens, batch has {n}")

    rows = np.arange(n)
    two = routing.is_top2.astype(np.float64)
    p_first = probs[rows, routing.first]
    if len(experts) > 1:
        p_second = probs[rows, routing.second]
        s = p_first + p_second
        w_first = p_first / s * two
        w_second = p_second / s * two
    else:
        w_first = p_first * 0.0
        w_second = p_first * 0.0
    if top1_weight == "renormalized":
        w_first = w_first + (1.0 - two)
    else:
        w_first = w_first + p_first * (1.0 - two)
    weights = concat([w_first.reshape(n, 1), w_second.reshape(n, 1)], axis=1)

    out = None
    slot2_rows = np.flatnonzero(routing.is_top2)
    for e, expert in enumerate(experts):
        r0 = np.flatnonzero(routing.first == e)
        r1 = slot2_rows[routing.second[slot2_rows] == e]
        if len(r0) + len(r1) == 0:
            continue
        idx = np.concatenate([r0, r1])
        slots = np.concatenate([np.zeros(len(r0), dtype=np.intp), np.ones(len(r1), dtype=np.intp)])
        y = expert_forward(expert, x[idx]) * weights[idx, slots].reshape(-1, 1)
        part = index_add(n, idx, y)
        out = part if out is None else out + part
    if out is None:
        out = Tensor(np.zeros(x.shape))
    return MoELayerOutput(out, routing, probs, weights, make_stats(routing, probs))
