"""LoRA experts and the mixture layer that applies them over a frozen base.

Each expert is a rank-r pair (W_A, W_B) added on top of a frozen linear
weight. A routing decision picks which experts contribute per instance or
per token; only experts with nonzero assignment are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamStore, ShapeError, Tensor, matmul

__all__ = ["ConfigError", "LoRAExpert", "MoLELayer", "init_experts", "expert_forward", "mole_forward"]


class ConfigError(ValueError):
    """Raised for invalid layer / experiment configuration."""


@dataclass
class LoRAExpert:
    """Parameter names of one expert's down/up projection in a ParamStore."""

    name_a: str
    name_b: str
    rank: int

    def forward(self, store: ParamStore, x: Tensor) -> Tensor:
        return expert_forward(store.leaf(self.name_a), store.leaf(self.name_b), x)


def expert_forward(w_a: Tensor, w_b: Tensor, x: Tensor) -> Tensor:
    """Low-rank update X W_A W_B, evaluated as (X W_A) W_B."""
    if x.shape[-1] != w_a.shape[0]:
        raise ShapeError(f"expert input dim {x.shape[-1]} != W_A rows {w_a.shape[0]}")
    return matmul(matmul(x, w_a), w_b)


@dataclass
class MoLELayer:
    """A frozen base weight plus N routed LoRA experts.

    The gate lives in the routing module; this layer only consumes its
    decisions. ``w0_name`` must be registered frozen in the store.
    """

    name: str
    w0_name: str
    experts: list[LoRAExpert]
    n_experts: int
    top_k: int
    rank: int
    d_in: int
    d_out: int
    gate_name: str = field(default="")

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"need at least one expert, got N={self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"k={self.top_k} outside [1, N={self.n_experts}]")


def init_experts(
    store: ParamStore,
    prefix: str,
    n_experts: int,
    rank: int,
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
) -> list[LoRAExpert]:
    """Register N experts: W_A ~ N(0, 1/d_in) per entry, W_B = 0.

    Zero-init of W_B makes a fresh layer reproduce the frozen base exactly.
    """
    if rank > min(d_in, d_out):
        raise ConfigError(f"rank {rank} > min({d_in}, {d_out})")
    experts = []
    for i in range(n_experts):
        name_a = f"{prefix}.expert{i}.A"
        name_b = f"{prefix}.expert{i}.B"
        store.add(name_a, rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)))
        store.add(name_b, np.zeros((rank, d_out)))
        experts.append(LoRAExpert(name_a, name_b, rank))
    return experts


def make_mole_layer(
    store: ParamStore,
    name: str,
    n_experts: int,
    top_k: int,
    rank: int,
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
    w0_scale: float = 1.0,
) -> MoLELayer:
    """Register a frozen base weight and its expert pool under ``name``."""
    w0_name = f"{name}.W0"
    store.add(w0_name, rng.normal(0.0, w0_scale / np.sqrt(d_in), size=(d_in, d_out)), frozen=True)
    experts = init_experts(store, name, n_experts, rank, d_in, d_out, rng)
    return MoLELayer(name, w0_name, experts, n_experts, top_k, rank, d_in, d_out)


def mole_forward(layer: MoLELayer, store: ParamStore, x: Tensor, decision) -> Tensor:
    """Frozen base output plus the routed, weighted expert updates.

    Only experts with at least one nonzero assignment are evaluated; the
    per-expert weight map broadcasts over tokens for instance decisions.
    """
    if x.ndim != 3:
        raise ShapeError(f"mole_forward expects B x L x D input, got {x.shape}")
    idx = decision.indices
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= layer.n_experts:
        raise ShapeError(f"expert index outside [0, {layer.n_experts})")
    if decision.granularity == "token" and idx.shape[1] not in (1, x.shape[1]):
        raise ShapeError("token decision length disagrees with input")
    if decision.policy in ("igr", "token_topk") and decision.n_slots != layer.top_k:
        raise ShapeError(f"decision carries {decision.n_slots} weights, layer expects k={layer.top_k}")

    y = matmul(x, store.leaf(layer.w0_name))
    weights = decision.weights  # B x R x S tensor, R in {1, L}
    valid = decision.valid_mask()
    for i in range(layer.n_experts):
        hit = (idx == i) & valid
        if not hit.any():
            continue
        # sum of slot weights assigned to expert i, per routing row
        sel = Tensor(hit.astype(np.float64), check=False)
        w_i = (weights * sel).sum(axis=-1, keepdims=True)  # B x R x 1
        y = y + w_i * layer.experts[i].forward(store, x)
    return y


def all_expert_outputs(layer: MoLELayer, store: ParamStore, x: Tensor) -> list[Tensor]:
    """Raw pre-gating outputs of every expert (for the diversity loss)."""
    return [e.forward(store, x) for e in layer.experts]
