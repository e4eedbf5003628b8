"""Routing policies: instance-level instruction-guided routing, token-level
Top-k, and Expert Choice, plus per-layer policy maps and routing metrics.

All policies produce a :class:`RoutingDecision`: selected expert indices,
their unnormalized softmax weights, and the full probability tensor kept
for the load-balancing loss. Ties break toward the lowest index so every
decision is deterministic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .experts import ConfigError
from .tensor import ParamStore, ShapeError, Tensor, gather_last, matmul, reshape, softmax

POLICY_NAMES = ("igr", "token_topk", "expert_choice")

__all__ = [
    "GateNet",
    "RoutingDecision",
    "LayerPolicyMap",
    "topk",
    "igr_route",
    "token_topk_route",
    "expert_choice_route",
    "consistency",
    "fragmentation",
    "routing_logit_count",
]


@dataclass
class GateNet:
    """A linear map from a routing input to N expert logits."""

    weight_name: str
    bias_name: str
    d_in: int
    n_experts: int

    def logits(self, store: ParamStore, z: Tensor) -> Tensor:
        return matmul(z, store.leaf(self.weight_name)) + store.leaf(self.bias_name)


def make_gate(
    store: ParamStore,
    name: str,
    d_in: int,
    n_experts: int,
    rng: np.random.Generator,
    init_scale: float = 1.0,
) -> GateNet:
    # init_scale < 1 keeps initial routing near-uniform (entropy ~ log N), so
    # specialization shows up as an entropy decrease rather than a reshuffle
    wn, bn = f"{name}.Wg", f"{name}.bg"
    store.add(wn, rng.normal(0.0, init_scale / np.sqrt(d_in), size=(d_in, n_experts)))
    store.add(bn, np.zeros(n_experts))
    return GateNet(wn, bn, d_in, n_experts)


@dataclass
class RoutingDecision:
    """Selected experts and weights for one layer's forward pass.

    ``indices``/``weights`` have shape B x R x S where R is 1 for instance
    granularity and L for token granularity. Expert Choice may leave slots
    unassigned; those carry ``mask`` False and weight zero.
    """

    granularity: str  # "instance" | "token"
    indices: np.ndarray
    weights: Tensor
    full_probs: Tensor
    policy: str = "igr"
    mask: Optional[np.ndarray] = None  # B x R x S validity; None means all valid

    def __post_init__(self):
        if self.granularity not in ("instance", "token"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.indices.shape != self.weights.shape:
            raise ShapeError("indices and weights shapes disagree")

    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.indices.shape, dtype=bool)
        return self.mask

    @property
    def n_slots(self) -> int:
        return self.indices.shape[-1]

    def selected_sets(self, length: int) -> list[list[frozenset]]:
        """Per instance, the selected expert set at each of ``length`` tokens."""
        b, r, _ = self.indices.shape
        valid = self.valid_mask()
        out = []
        for bi in range(b):
            if r == 1:
                s = frozenset(self.indices[bi, 0][valid[bi, 0]].tolist())
                out.append([s] * length)
            else:
                out.append(
                    [frozenset(self.indices[bi, t][valid[bi, t]].tolist()) for t in range(r)]
                )
        return out


def topk(p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries along the last axis.

    Ties break toward the lowest index (stable descending sort).
    """
    n = p.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    idx = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    vals = np.take_along_axis(p, idx, axis=-1)
    return idx, vals


def _topk_decision(logits: Tensor, k: int, granularity: str, policy: str) -> RoutingDecision:
    probs = softmax(logits, axis=-1)
    idx, _ = topk(probs.data, k)
    weights = gather_last(probs, idx)  # unnormalized softmax probabilities
    return RoutingDecision(granularity, idx, weights, probs, policy=policy)


def igr_route(gate: GateNet, store: ParamStore, z_global: Tensor, k: int) -> RoutingDecision:
    """Instance-level routing from the global instruction signal.

    One expert set per instance, broadcast to every token; the logits
    tensor is B x 1 x N.
    """
    if z_global.ndim != 2:
        raise ShapeError(f"z_global must be B x D, got {z_global.shape}")
    logits = gate.logits(store, z_global)
    logits = reshape(logits, (logits.shape[0], 1, gate.n_experts))
    return _topk_decision(logits, k, "instance", "igr")


def token_topk_route(gate: GateNet, store: ParamStore, x: Tensor, k: int) -> RoutingDecision:
    """Standard token-level Top-k routing from each token's hidden state."""
    if x.ndim != 3 or x.shape[-1] != gate.d_in:
        raise ShapeError(f"gate expects B x L x {gate.d_in}, got {x.shape}")
    logits = gate.logits(store, x)  # B x L x N
    return _topk_decision(logits, k, "token", "token_topk")


def expert_choice_route(
    gate: GateNet,
    store: ParamStore,
    x: Tensor,
    k: int,
    capacity_factor: float = 1.0,
) -> RoutingDecision:
    """Inverted assignment: each expert takes its top-capacity tokens.

    Capacity is floor(capacity_factor * B*L*k / N) over the flattened
    token pool; a token may end up with anywhere from 0 to N experts.
    Weights are the token's softmax-over-experts probabilities at the
    selected experts.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected B x L x D input, got {x.shape}")
    b, length, _ = x.shape
    n = gate.n_experts
    capacity = int(np.floor(capacity_factor * b * length * k / n))
    if capacity < 1:
        raise ConfigError(f"capacity {capacity} < 1 (capacity_factor too small)")
    capacity = min(capacity, b * length)

    logits = gate.logits(store, x)  # B x L x N
    probs = softmax(logits, axis=-1)
    flat_logits = logits.data.reshape(-1, n)  # (B*L) x N

    # per expert: top-capacity tokens by logit, ties to the lowest token index
    chosen = np.zeros((b * length, n), dtype=bool)
    for i in range(n):
        order = np.argsort(-flat_logits[:, i], kind="stable")[:capacity]
        chosen[order, i] = True

    n_slots = max(1, int(chosen.sum(axis=-1).max()))
    idx = np.zeros((b * length, n_slots), dtype=np.int64)
    mask = np.zeros((b * length, n_slots), dtype=bool)
    for t in range(b * length):
        sel = np.flatnonzero(chosen[t])
        idx[t, : sel.size] = sel
        mask[t, : sel.size] = True

    idx = idx.reshape(b, length, n_slots)
    mask = mask.reshape(b, length, n_slots)
    gathered = gather_last(probs, idx)
    weights = gathered * Tensor(mask.astype(np.float64), check=False)
    return RoutingDecision("token", idx, weights, probs, policy="expert_choice", mask=mask)


def consistency(decision: RoutingDecision, length: Optional[int] = None) -> float:
    """Fraction of within-instance token pairs with identical expert sets.

    1.0 by construction for instance-level decisions.
    """
    if decision.granularity == "instance":
        return 1.0
    b, r, _ = decision.indices.shape
    length = r if length is None else length
    if length < 2:
        raise ConfigError("consistency needs at least 2 tokens")
    sets = decision.selected_sets(length)
    total = 0
    agree = 0
    for bi in range(b):
        for i, j in combinations(range(length), 2):
            total += 1
            if sets[bi][i] == sets[bi][j]:
                agree += 1
    return agree / total


def fragmentation(decision: RoutingDecision, adjacency: Optional[list[tuple[int, int]]] = None) -> float:
    """Fraction of adjacent token pairs whose expert sets differ.

    Adjacency defaults to a 1-D chain over the token axis; zero for any
    instance-level decision.
    """
    b, r, _ = decision.indices.shape
    length = r if decision.granularity == "token" else max(r, 2)
    if adjacency is None:
        adjacency = [(t, t + 1) for t in range(length - 1)]
    if decision.granularity == "instance":
        return 0.0
    for i, j in adjacency:
        if not (0 <= i < length and 0 <= j < length):
            raise ConfigError(f"adjacency pair ({i}, {j}) outside [0, {length})")
    sets = decision.selected_sets(length)
    total = b * len(adjacency)
    differ = sum(1 for bi in range(b) for i, j in adjacency if sets[bi][i] != sets[bi][j])
    return differ / total if total else 0.0


def routing_logit_count(policy: str, b: int, length: int, n: int) -> int:
    """Logits materialized per step: B*N for instance, B*L*N for token policies."""
    if min(b, length, n) < 1:
        raise ConfigError("arguments must be positive")
    if policy == "igr":
        return b * n
    if policy in ("token_topk", "expert_choice"):
        return b * length * n
    raise ConfigError(f"unknown policy {policy!r}")


_RANGE_RE = re.compile(r"^(\d+)(?:\.\.(\d+))?$")


@dataclass
class LayerPolicyMap:
    """Ordered layer-range -> policy assignments covering all layers once."""

    assignments: list[tuple[range, str]]
    n_layers: int = field(default=0)

    @classmethod
    def parse(cls, entries: list[dict], n_layers: int) -> "LayerPolicyMap":
        """Parse config entries like {"layers": "0..2", "name": "igr"}."""
        assignments = []
        for e in entries:
            m = _RANGE_RE.match(str(e["layers"]).strip())
            if not m:
                raise ConfigError(f"bad layer range {e['layers']!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) is not None else lo
            name = e["name"]
            if name not in POLICY_NAMES:
                raise ConfigError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
            assignments.append((range(lo, hi + 1), name))
        pmap = cls(assignments, n_layers)
        pmap.validate()
        return pmap

    @classmethod
    def uniform(cls, policy: str, n_layers: int) -> "LayerPolicyMap":
        return cls.parse([{"layers": f"0..{n_layers - 1}", "name": policy}], n_layers)

    def validate(self) -> None:
        covered: list[int] = []
        for rng, _ in self.assignments:
            covered.extend(rng)
        if sorted(covered) != list(range(self.n_layers)):
            raise ConfigError(
                f"policy map must cover layers 0..{self.n_layers - 1} exactly once, got {sorted(covered)}"
            )

    def policy_for(self, layer: int) -> str:
        for rng, name in self.assignments:
            if layer in rng:
                return name
        raise ConfigError(f"layer {layer} not covered by policy map")

    def to_config(self) -> list[dict]:
        return [
            {"layers": f"{r.start}..{r.stop - 1}", "name": name} for r, name in self.assignments
        ]
