"""Order training samples by how their routing complexity resembles the easiest one.

A sample's complexity vector holds, per MoE layer, the share of its tokens that
took two experts. The anchor is the sample with the fewest two-expert tokens in
total; the others follow by decreasing cosine similarity to it.

Orderings are decided with exact rational arithmetic so that collinear vectors
(very common: ratios are small fractions ``k / n``) tie exactly and fall back to
sample id, independent of floating-point summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class ComplexityVector:
    sample_id: int
    r: tuple[float, ...]
    seq_len: int = 1

    def __post_init__(self):
        if any(not 0.0 <= v <= 1.0 for v in self.r):
            raise ValueError(f"complexity ratios must lie in [0, 1]: {self.r}")

    def top2_tokens(self) -> Fraction:
        """Total two-expert token count over layers, exact."""
        return sum((Fraction(v) for v in self.r), Fraction(0)) * self.seq_len

    def mean_ratio(self) -> Fraction:
        return sum((Fraction(v) for v in self.r), Fraction(0)) / len(self.r)


def complexity_vector(sample_id: int, is_top2_per_layer: Sequence[Sequence[bool]], seq_len: int) -> ComplexityVector:
    """``r[i]`` = two-expert tokens at layer ``i`` / ``seq_len`` (non-pad tokens)."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    r = tuple(int(np.count_nonzero(flags)) / seq_len for flags in is_top2_per_layer)
    return ComplexityVector(sample_id, r, seq_len)


def select_anchor(vectors: Sequence[ComplexityVector], by: str = "count") -> int:
    """Sample id with the fewest two-expert tokens (``by="mean_ratio"`` ranks by mean ratio)."""
    if not vectors:
        raise ContractError("select_anchor needs at least one vector")
    key = ComplexityVector.top2_tokens if by == "count" else ComplexityVector.mean_ratio
    return min(vectors, key=lambda v: (key(v), v.sample_id)).sample_id


def cosine_similarity(a: ComplexityVector, b: ComplexityVector) -> float:
    if len(a.r) != len(b.r):
        raise ContractError(f"cosine_similarity: lengths {len(a.r)} and {len(b.r)} differ")
    na = math.sqrt(math.fsum(x * x for x in a.r))
    nb = math.sqrt(math.fsum(x * x for x in b.r))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, math.fsum(x * y for x, y in zip(a.r, b.r)) / (na * nb)))


def _similarity_key(a: ComplexityVector, b: ComplexityVector) -> Fraction:
    """Exact monotone transform of cosine similarity: ``sign(dot) * dot^2 / (|a|^2 |b|^2)``."""
    fa = [Fraction(x) for x in a.r]
    fb = [Fraction(x) for x in b.r]
    na = sum(x * x for x in fa)
    nb = sum(x * x for x in fb)
    if na == 0 and nb == 0:
        return Fraction(1)
    if na == 0 or nb == 0:
        return Fraction(0)
    dot = sum(x * y for x, y in zip(fa, fb))
    sq = dot * dot / (na * nb)
    return sq if dot >= 0 else -sq


def reorder(vectors: Sequence[ComplexityVector], anchor_by: str = "count") -> list[int]:
    """Anchor first, then the rest by decreasing similarity to it (ties by id)."""
    if not vectors:
        raise ContractError("reorder needs at least one vector")
    anchor_id = select_anchor(vectors, by=anchor_by)
    anchor = next(v for v in vectors if v.sample_id == anchor_id)
    rest = [v for v in vectors if v.sample_id != anchor_id]
    rest.sort(key=lambda v: (-_similarity_key(anchor, v), v.sample_id))
    return [anchor_id] + [v.sample_id for v in rest]


def epoch_schedule(
    epoch: int,
    sample_ids: Sequence[int],
    vectors: Sequence[ComplexityVector] | None,
    curriculum: bool = True,
    seed: int = 0,
    anchor_by: str = "count",
) -> list[int]:
    """Sample order for a (1-based) epoch.

    Epoch 1 keeps corpus order. Later epochs reorder by the complexity vectors
    measured in the previous epoch, or, with ``curriculum=False``, use a shuffle
    seeded by ``(seed, epoch)``.
    """
    ids = list(sample_ids)
    if epoch <= 1:
        return ids
    if not curriculum:
        rng = np.random.default_rng([seed, epoch])
        return [ids[i] for i in rng.permutation(len(ids))]
    if vectors is None:
        raise ContractError("curriculum schedule needs the previous epoch's complexity vectors")
    if sorted(v.sample_id for v in vectors) != sorted(ids):
        raise ContractError("complexity vectors do not cover the sample set exactly")
    return reorder(vectors, anchor_by=anchor_by)


def format_schedule_line(epoch: int, order: Sequence[int]) -> str:
    """One line of the schedule dump: ``<epoch>\\t<id> <id> ...``."""
    return f"{epoch}\t" + " ".join(str(i) for i in order)


def parse_schedule(text: str) -> dict[int, list[int]]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            epoch, _, ids = line.partition("\t")
            out[int(epoch)] = [int(i) for i in ids.split()]
    return out
