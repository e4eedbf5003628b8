"""Composite training objective: synthetic task loss, load-balancing loss
over routing statistics, and the output-space orthogonality loss that
penalizes functionally redundant experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .routing import RoutingDecision
from .tensor import ShapeError, Tensor, div, mul, reshape, sqrt, square, tsum

__all__ = [
    "UsageStats",
    "LossReport",
    "usage_stats",
    "aux_loss",
    "ortho_loss",
    "task_loss",
    "total_loss",
]

COSINE_EPS = 1e-12


@dataclass
class UsageStats:
    """Per-expert usage over a batch.

    ``f`` is the hard fraction of (row, slot) assignments per expert and is
    treated as a constant; ``p`` is the mean routing probability and keeps
    its gradient path. Both sum to 1.
    """

    f: np.ndarray
    p: Tensor
    n_experts: int


def usage_stats(decision: RoutingDecision) -> UsageStats:
    probs = decision.full_probs
    n = probs.shape[-1]
    if probs.shape[0] == 0:
        raise ShapeError("empty batch")
    valid = decision.valid_mask()
    counts = np.zeros(n)
    np.add.at(counts, decision.indices[valid], 1.0)
    total = counts.sum()
    if total == 0:
        raise ShapeError("decision has no assignments")
    f = counts / total
    rows = probs.shape[0] * probs.shape[1]
    p = reshape(probs, (rows, n)).mean(axis=0)
    return UsageStats(f, p, n)


def aux_loss(stats: UsageStats) -> Tensor:
    """Load-balancing penalty N * sum_i f_i p_i; 1.0 at perfect balance."""
    f_const = Tensor(stats.f, check=False)
    return tsum(mul(f_const, stats.p)) * float(stats.n_experts)


def _flat_unit(v: Tensor) -> tuple[Tensor, Tensor]:
    flat = reshape(v, (v.data.size,))
    norm = sqrt(tsum(square(flat)) + COSINE_EPS)
    return flat, norm


def ortho_loss(expert_outputs: list[Tensor]) -> Tensor:
    """Mean squared cosine similarity over all unique expert-output pairs.

    Outputs are flattened to vectors; the eps guard makes all-zero experts
    (fresh zero-init) contribute zero rather than NaN.
    """
    n = len(expert_outputs)
    if n < 2:
        raise ShapeError("ortho_loss needs at least two experts")
    flats = [_flat_unit(v) for v in expert_outputs]
    acc = Tensor(0.0, check=False)
    for i in range(n):
        vi, ni = flats[i]
        for j in range(i + 1, n):
            vj, nj = flats[j]
            cos = div(tsum(mul(vi, vj)), mul(ni, nj))
            acc = acc + square(cos)
    # mean over ordered pairs; each unordered pair counts twice
    return acc * (2.0 / (n * (n - 1)))


def task_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return square(pred - target).mean()


def total_loss(task: Tensor, aux: Tensor, ortho: Tensor, lambda_aux: float, lambda_ortho: float) -> Tensor:
    if lambda_aux < 0 or lambda_ortho < 0:
        raise ValueError("loss weights must be nonnegative")
    return task + aux * lambda_aux + ortho * lambda_ortho


@dataclass
class LossReport:
    """Scalar loss breakdown for one step; aux/ortho are layer averages."""

    total: float
    task: float
    aux: float
    ortho: float
    per_layer_aux: list[float] = field(default_factory=list)
    per_layer_ortho: list[float] = field(default_factory=list)

    def check(self, lambda_aux: float, lambda_ortho: float, tol: float = 1e-10) -> bool:
        return abs(self.total - (self.task + lambda_aux * self.aux + lambda_ortho * self.ortho)) < tol
