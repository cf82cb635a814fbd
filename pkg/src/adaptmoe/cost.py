"""Expert FLOPs accounting and a one-parameter step-time model.

Compute and time are both expressed relative to always-top-2 routing. The
step-time model explains why time savings lag compute savings: tokens that
take two experts hold up the whole batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

# Measured MoE-layer (compute, running time) pairs, both normalised to top-2
# gating, for 100% / 80% / 50% / 20% of tokens on a single expert.
REFERENCE_PAIRS: tuple[tuple[float, float], ...] = (
    (0.5, 0.67),
    (0.6, 0.76),
    (0.75, 0.92),
    (0.9, 0.97),
)

FORMS = ("straggler", "affine")


def expert_flops(hidden: int, intermediate: int) -> float:
    """FLOPs of one expert call on one token: two matmuls, 2 FLOPs per MAC."""
    if hidden <= 0 or intermediate <= 0:
        raise ValueError("sizes must be positive")
    return 4.0 * hidden * intermediate


def normalized_compute(frac_top1: float) -> float:
    if not 0.0 <= frac_top1 <= 1.0:
        raise ValueError(f"frac_top1 must lie in [0, 1], got {frac_top1}")
    return 1.0 - frac_top1 / 2.0


def _overhead_shape(compute, form: str):
    if form == "straggler":
        return compute * (1.0 - compute)
    if form == "affine":
        return 1.0 - compute
    raise ValueError(f"unknown step-time form {form!r}; expected one of {FORMS}")


def step_time_from_compute(compute, omega: float, form: str = "straggler"):
    return compute + omega * _overhead_shape(compute, form)


def step_time_model(frac_top1: float, omega: float, form: str = "straggler") -> float:
    """Modelled step time relative to top-2 routing.

    ``straggler`` (default): ``c + omega * c * (1 - c)`` with ``c`` the normalised
    compute, i.e. a share ``omega * c`` of the saved work is lost waiting for
    two-expert tokens. ``affine``: ``omega + (1 - omega) * c``, a fixed overhead
    plus proportional compute. Both give 1 at ``frac_top1 = 0``, reduce to ``c``
    at ``omega = 0`` and never drop below ``c`` for ``omega >= 0``.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    return float(step_time_from_compute(normalized_compute(frac_top1), omega, form))


@dataclass
class OmegaFit:
    omega: float
    form: str
    compute: np.ndarray
    time: np.ndarray
    predicted: np.ndarray

    @property
    def residuals(self) -> np.ndarray:
        return self.predicted - self.time

    @property
    def max_abs_residual(self) -> float:
        return float(np.abs(self.residuals).max())


def fit_omega(pairs: Sequence[tuple[float, float]] = REFERENCE_PAIRS, form: str = "straggler") -> OmegaFit:
    """Least-squares ``omega`` for (compute, time) pairs.

    The model is linear in ``omega`` (``t - c = omega * g(c)``) so the fit is closed
    form. Pairs at ``c = 1`` carry no information about ``omega`` and are ignored.
    """
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    c, t = arr[:, 0], arr[:, 1]
    g = _overhead_shape(c, form)
    denom = float(g @ g)
    if denom == 0.0:
        raise ValueError("pairs do not constrain omega (all at compute 1)")
    omega = float(g @ (t - c)) / denom
    return OmegaFit(omega, form, c, t, step_time_from_compute(c, omega, form))


@dataclass
class CostReport:
    expert_flops_per_token: float
    batch_expert_flops: float
    norm_compute: float
    modeled_step_time: float
    frac_top1: float
    invocations: int
    token_decisions: int
    total_flops: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def model_flops_per_token(hidden: int, num_layers: int, num_experts: int, vocab: int, seq_len: int) -> float:
    """Rough non-expert FLOPs per token (attention projections and scores, gate, head)."""
    per_layer = 2 * 4 * hidden * hidden + 2 * 2 * seq_len * hidden + 2 * hidden * num_experts
    return float(num_layers * per_layer + 2 * hidden * vocab)


def batch_cost(
    routings: Sequence,
    hidden: int,
    intermediate: int,
    omega: float | None = None,
    form: str = "straggler",
    other_flops_per_token: float = 0.0,
) -> CostReport:
    """Exact expert FLOPs for one forward pass from its per-layer routing tables.

    ``routings`` holds one table per MoE layer (anything with ``is_top2``). When
    ``omega`` is None the reference-pair fit is used.
    """
    if omega is None:
        omega = fit_omega(form=form).omega
    per_call = expert_flops(hidden, intermediate)
    invocations = 0
    decisions = 0
    top1 = 0
    tokens = 0
    for r in routings:
        is_top2 = np.asarray(r.is_top2, dtype=bool)
        n2 = int(is_top2.sum())
        invocations += len(is_top2) + n2
        decisions += len(is_top2)
        top1 += len(is_top2) - n2
        tokens = max(tokens, len(is_top2))
    frac_top1 = top1 / decisions if decisions else 1.0
    flops = invocations * per_call
    return CostReport(
        expert_flops_per_token=flops / tokens if tokens else 0.0,
        batch_expert_flops=flops,
        norm_compute=normalized_compute(frac_top1),
        modeled_step_time=step_time_model(frac_top1, omega, form),
        frac_top1=frac_top1,
        invocations=invocations,
        token_decisions=decisions,
        total_flops=flops + other_flops_per_token * tokens,
    )
