"""The global routing signal: toy instruction encoders, a Perceiver-style
attentional bottleneck over instruction tokens, and the additive fusion
with the pooled holistic embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experts import ConfigError
from .tensor import (
    ParamStore,
    ShapeError,
    Tensor,
    attention,
    layer_norm,
    matmul,
    reshape,
)

__all__ = [
    "InstructionEncoding",
    "ToyEncoder",
    "PerceiverBottleneck",
    "distill",
    "fuse_global",
    "signal_variant",
    "SIGNAL_MODES",
]

SIGNAL_MODES = ("pooled_only", "full")


@dataclass
class InstructionEncoding:
    """Frozen stand-in for (token-level features, pooled embedding)."""

    h_inst: Tensor  # B x L_inst x D_inst
    pooled: Tensor  # B x D
    ids: list[list[int]]


class ToyEncoder:
    """Deterministic frozen embedding tables standing in for real text encoders.

    Token features come from a random embedding table lookup; the pooled
    vector is a frozen random projection of the mean token embedding.
    Tables live in the ParamStore as frozen parameters so the zero-gradient
    contract is checkable.
    """

    def __init__(self, store: ParamStore, vocab_size: int, d_inst: int, d: int, seed: int, prefix: str = "encoder"):
        if vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_inst = d_inst
        self.d = d
        self.table_name = f"{prefix}.table"
        self.pool_name = f"{prefix}.pool"
        self.store = store
        store.add(self.table_name, rng.normal(0.0, 1.0, size=(vocab_size, d_inst)), frozen=True)
        store.add(self.pool_name, rng.normal(0.0, 1.0 / np.sqrt(d_inst), size=(d_inst, d)), frozen=True)

    def encode(self, ids: list[list[int]]) -> InstructionEncoding:
        """Encode a batch of token-id lists (all must share one length)."""
        if not ids or any(len(row) < 1 for row in ids):
            raise ConfigError("each instruction needs at least one token")
        lengths = {len(row) for row in ids}
        if len(lengths) != 1:
            raise ConfigError("instructions in a batch must share one length")
        for row in ids:
            for t in row:
                if not 0 <= t < self.vocab_size:
                    raise ConfigError(f"token id {t} outside vocabulary [0, {self.vocab_size})")
        table = self.store.value(self.table_name)
        pool = self.store.value(self.pool_name)
        h = np.stack([table[row] for row in ids])  # B x L_inst x D_inst
        pooled = h.mean(axis=1) @ pool  # B x D
        return InstructionEncoding(Tensor(h, check=False), Tensor(pooled, check=False), [list(r) for r in ids])


class PerceiverBottleneck:
    """A learnable latent query attending over projected instruction tokens.

    S residual single-head attention layers (per-layer Q/K/V/output
    projections), followed by an output projection and layer norm at fusion
    time. No positional encoding, so the distilled summary is invariant to
    instruction-token order.
    """

    def __init__(self, store: ParamStore, d_inst: int, d: int, n_layers: int, rng: np.random.Generator, prefix: str = "signal"):
        if n_layers < 1:
            raise ConfigError("need at least one attention layer")
        self.d_inst = d_inst
        self.d = d
        self.n_layers = n_layers
        self.prefix = prefix
        self.store = store
        s = 1.0 / np.sqrt(d)
        store.add(f"{prefix}.W_in", rng.normal(0.0, 1.0 / np.sqrt(d_inst), size=(d_inst, d)))
        store.add(f"{prefix}.Q_latent", rng.normal(0.0, 1.0, size=(1, 1, d)))
        for si in range(n_layers):
            for proj in ("Wq", "Wk", "Wv", "Wo"):
                store.add(f"{prefix}.attn{si}.{proj}", rng.normal(0.0, s, size=(d, d)))
        store.add(f"{prefix}.W_out", rng.normal(0.0, s, size=(d, d)))
        store.add(f"{prefix}.ln_gamma", np.ones(d))
        store.add(f"{prefix}.ln_beta", np.zeros(d))

    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.prefix + ".")]


def distill(pb: PerceiverBottleneck, h_inst: Tensor) -> Tensor:
    """Distill instruction tokens into one latent per instance (B x D)."""
    if h_inst.ndim != 3 or h_inst.shape[-1] != pb.d_inst:
        raise ShapeError(f"expected B x L_inst x {pb.d_inst}, got {h_inst.shape}")
    if h_inst.shape[1] == 0:
        raise ShapeError("instruction has no tokens")
    store = pb.store
    b = h_inst.shape[0]
    x_tilde = matmul(h_inst, store.leaf(f"{pb.prefix}.W_in"))  # B x L_inst x D
    q0 = store.leaf(f"{pb.prefix}.Q_latent")
    latent = q0 + Tensor(np.zeros((b, 1, pb.d)), check=False)  # tile over batch
    for si in range(pb.n_layers):
        q = matmul(latent, store.leaf(f"{pb.prefix}.attn{si}.Wq"))
        k = matmul(x_tilde, store.leaf(f"{pb.prefix}.attn{si}.Wk"))
        v = matmul(x_tilde, store.leaf(f"{pb.prefix}.attn{si}.Wv"))
        attended = matmul(attention(q, k, v), store.leaf(f"{pb.prefix}.attn{si}.Wo"))
        latent = latent + attended
    return reshape(latent, (b, pb.d))


def fuse_global(pb: PerceiverBottleneck, l_s: Tensor, pooled: Tensor) -> Tensor:
    """Layer-normed projection of the distilled summary plus the pooled anchor."""
    if l_s.shape != pooled.shape:
        raise ShapeError(f"summary {l_s.shape} and pooled {pooled.shape} disagree")
    store = pb.store
    projected = matmul(l_s, store.leaf(f"{pb.prefix}.W_out"))
    normed = layer_norm(projected, store.leaf(f"{pb.prefix}.ln_gamma"), store.leaf(f"{pb.prefix}.ln_beta"))
    return normed + pooled


def signal_variant(mode: str):
    """Return a function (bottleneck, encoding) -> routing signal B x D."""
    if mode == "pooled_only":
        return lambda pb, enc: enc.pooled
    if mode == "full":
        return lambda pb, enc: fuse_global(pb, distill(pb, enc.h_inst), enc.pooled)
    raise ConfigError(f"unknown signal mode {mode!r}; expected one of {SIGNAL_MODES}")
