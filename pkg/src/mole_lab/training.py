"""Synthetic multi-conditional task suite, the stacked adapted backbone,
AdamW, and the experiment runner that logs metrics and routing snapshots.

Each task is a frozen random linear map; an instance's instruction template
names its task, so a well-routed model can dispatch instances to experts
specialized for that map.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_params
from .experts import ConfigError, MoLELayer, all_expert_outputs, make_mole_layer, mole_forward
from .losses import LossReport, aux_loss, ortho_loss, task_loss, total_loss, usage_stats
from .routing import (
    GateNet,
    LayerPolicyMap,
    expert_choice_route,
    igr_route,
    make_gate,
    token_topk_route,
)
from .signal import PerceiverBottleneck, ToyEncoder, signal_variant
from .tensor import ParamStore, Tensor, concat_tokens, gelu, matmul, slice_tokens

__all__ = [
    "ExperimentConfig",
    "TaskSpec",
    "Batch",
    "Model",
    "AdamW",
    "make_task_suite",
    "sample_batch",
    "train_step",
    "eval_task_loss",
    "run_experiment",
]


# -- configuration -----------------------------------------------------


@dataclass
class ExperimentConfig:
    """Full hyper-parameter record for one run; JSON round-trips losslessly."""

    n_experts: int = 8
    top_k: int = 4
    rank: int = 32
    layers: int = 2
    d_in: int = 32
    d_out: int = 32
    d_signal: int = 16
    d_inst: int = 32
    seq_len: int = 8
    inst_len: int = 3
    n_tasks: int = 4
    policy: list = field(default_factory=lambda: [{"layers": "0..1", "name": "igr"}])
    signal_mode: str = "full"
    lambda_aux: float = 0.01
    lambda_ortho: float = 0.1
    lr: float = 3e-3
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    noise_sigma: float = 0.0
    capacity_factor: float = 2.0
    ortho_warmup: int = 10
    eval_every: int = 100
    n_attrs: int = 4

    def validate(self) -> None:
        if self.n_experts < 1 or not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"bad N={self.n_experts}, k={self.top_k}")
        if self.rank > min(self.d_in, self.d_out):
            raise ConfigError(f"rank {self.rank} > min({self.d_in}, {self.d_out})")
        if self.layers < 2:
            raise ConfigError("need at least 2 layers so hybrid policy maps are expressible")
        if self.n_tasks < 2:
            raise ConfigError("need at least 2 tasks")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.signal_mode not in ("pooled_only", "full"):
            raise ConfigError(f"unknown signal mode {self.signal_mode!r}")
        LayerPolicyMap.parse(self.policy, self.layers)

    def policy_map(self) -> LayerPolicyMap:
        return LayerPolicyMap.parse(self.policy, self.layers)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- task suite --------------------------------------------------------


@dataclass
class TaskSpec:
    task_id: int
    target_map: np.ndarray  # d_in x d_out, frozen
    template: list[int]
    sigma: float


def _orthogonalish(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    g = rng.normal(size=(max(d_in, d_out), max(d_in, d_out)))
    q, _ = np.linalg.qr(g)
    return q[:d_in, :d_out].copy()


def make_task_suite(config: ExperimentConfig, seed: Optional[int] = None) -> list[TaskSpec]:
    """Deterministic tasks: distinct orthogonal-ish maps + unique templates."""
    if config.n_tasks < 2:
        raise ConfigError("need at least 2 tasks")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    suite = []
    for t in range(config.n_tasks):
        m = _orthogonalish(rng, config.d_in, config.d_out)
        # template: the task token followed by a deterministic attribute mix
        attrs = [config.n_tasks + ((t + j) % config.n_attrs) for j in range(config.inst_len - 1)]
        suite.append(TaskSpec(t, m, [t] + attrs, config.noise_sigma))
    for i in range(len(suite)):
        for j in range(i + 1, len(suite)):
            d = np.linalg.norm(suite[i].target_map - suite[j].target_map)
            if d <= 0.1:
                raise ConfigError(f"tasks {i} and {j} are not distinct (distance {d:.3g})")
    return suite


@dataclass
class Batch:
    x: Tensor  # B x L x d_in
    targets: Tensor  # B x L x d_out
    encoding: object  # InstructionEncoding
    task_ids: np.ndarray


def sample_batch(
    suite: list[TaskSpec],
    encoder: ToyEncoder,
    b: int,
    seq_len: int,
    rng: np.random.Generator,
    task_ids: Optional[np.ndarray] = None,
) -> Batch:
    """Draw tasks uniformly, Gaussian inputs, targets X M_t + sigma * noise."""
    d_in, d_out = suite[0].target_map.shape
    if task_ids is None:
        task_ids = rng.integers(0, len(suite), size=b)
    x = rng.normal(size=(b, seq_len, d_in))
    targets = np.empty((b, seq_len, d_out))
    for i, t in enumerate(task_ids):
        spec = suite[t]
        targets[i] = x[i] @ spec.target_map
        if spec.sigma > 0:
            targets[i] += spec.sigma * rng.normal(size=(seq_len, d_out))
    encoding = encoder.encode([suite[t].template for t in task_ids])
    return Batch(Tensor(x, check=False), Tensor(targets, check=False), encoding, np.asarray(task_ids))


# -- model -------------------------------------------------------------


class Model:
    """Stacked blocks of frozen linear + MoLE adapter, GELU between blocks.

    The global routing signal is computed once per forward and shared by
    all instance-routed layers' gates. When any layer routes per token,
    instruction tokens are prepended to the sequence so token policies can
    see the task at all.
    """

    def __init__(self, config: ExperimentConfig, store: Optional[ParamStore] = None):
        config.validate()
        self.config = config
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
        self.policy_map = config.policy_map()
        self.encoder = ToyEncoder(
            self.store,
            vocab_size=config.n_tasks + config.n_attrs,
            d_inst=config.d_inst,
            d=config.d_signal,
            seed=config.seed + 1,
        )
        self.bottleneck = PerceiverBottleneck(
            self.store, config.d_inst, config.d_signal, n_layers=2, rng=rng
        )
        self.signal_fn = signal_variant(config.signal_mode)

        dims = [config.d_in] + [config.d_out] * config.layers
        self.blocks: list[MoLELayer] = []
        self.gates: list[GateNet] = []
        for li in range(config.layers):
            d_i, d_o = dims[li], dims[li + 1]
            layer = make_mole_layer(
                self.store, f"block{li}", config.n_experts, config.top_k,
                min(config.rank, d_i, d_o), d_i, d_o, rng,
            )
            policy = self.policy_map.policy_for(li)
            gate_dim = config.d_signal if policy == "igr" else d_i
            # instance gates start near-uniform so routing specializes by
            # concentrating; token gates keep conventional fan-in init
            gate_scale = 0.01 if policy == "igr" else 1.0
            gate = make_gate(
                self.store, f"block{li}.gate", gate_dim, config.n_experts, rng,
                init_scale=gate_scale,
            )
            layer.gate_name = gate.weight_name
            self.blocks.append(layer)
            self.gates.append(gate)

        self.suite = make_task_suite(config)
        self.uses_token_policy = any(
            self.policy_map.policy_for(li) != "igr" for li in range(config.layers)
        )
        if self.uses_token_policy:
            self.store.add(
                "prefix.proj",
                np.random.default_rng(config.seed + 2).normal(
                    0.0, 1.0 / np.sqrt(config.d_inst), size=(config.d_inst, config.d_in)
                ),
                frozen=True,
            )

    def forward(self, batch: Batch, with_expert_outputs: bool = False):
        """Run all blocks; returns (pred, decisions, per-layer expert outputs)."""
        cfg = self.config
        store = self.store
        z_global = self.signal_fn(self.bottleneck, batch.encoding)
        x = batch.x
        prefix_len = 0
        if self.uses_token_policy:
            prefix = matmul(batch.encoding.h_inst, store.leaf("prefix.proj"))
            prefix_len = prefix.shape[1]
            x = concat_tokens(prefix, x)

        decisions = []
        expert_outs: list[list[Tensor]] = []
        for li, (layer, gate) in enumerate(zip(self.blocks, self.gates)):
            policy = self.policy_map.policy_for(li)
            if policy == "igr":
                decision = igr_route(gate, store, z_global, layer.top_k)
            elif policy == "token_topk":
                decision = token_topk_route(gate, store, x, layer.top_k)
            else:
                decision = expert_choice_route(gate, store, x, layer.top_k, cfg.capacity_factor)
            if with_expert_outputs:
                expert_outs.append(all_expert_outputs(layer, store, x))
            y = mole_forward(layer, store, x, decision)
            decisions.append(decision)
            x = gelu(y) if li < len(self.blocks) - 1 else y
        pred = slice_tokens(x, prefix_len) if prefix_len else x
        return pred, decisions, expert_outs


# -- optimizer ---------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a store's trainable params."""

    def __init__(self, store: ParamStore, lr: float, weight_decay: float = 0.0,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store.value(n)) for n in store.trainable_names()}
        self.v = {n: np.zeros_like(store.value(n)) for n in store.trainable_names()}

    def step(self, store: ParamStore) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.m:
            g = store.grad(name)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p = store.value(name) * (1.0 - self.lr * self.weight_decay)
            store.set(name, p - self.lr * update)


# -- training loop -----------------------------------------------------


def _mean_tensor(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def forward_losses(model: Model, batch: Batch, step: int):
    """Full composite loss for one batch; aux/ortho are layer averages.

    The orthogonality term is skipped before the warmup step (zero-init
    experts all have zero output there).
    """
    cfg = model.config
    # a single expert has no pairs to decorrelate
    use_ortho = cfg.lambda_ortho > 0 and step >= cfg.ortho_warmup and cfg.n_experts >= 2
    pred, decisions, expert_outs = model.forward(batch, with_expert_outputs=use_ortho)

    task = task_loss(pred, batch.targets)
    aux_terms = [aux_loss(usage_stats(d)) for d in decisions]
    aux = _mean_tensor(aux_terms)
    if use_ortho:
        ortho_terms = [ortho_loss(outs) for outs in expert_outs]
        ortho = _mean_tensor(ortho_terms)
    else:
        ortho_terms = [Tensor(0.0, check=False) for _ in decisions]
        ortho = Tensor(0.0, check=False)
    total = total_loss(task, aux, ortho, cfg.lambda_aux, cfg.lambda_ortho)
    report = LossReport(
        total=total.item(),
        task=task.item(),
        aux=aux.item(),
        ortho=ortho.item(),
        per_layer_aux=[float(t.data) for t in aux_terms],
        per_layer_ortho=[float(t.data) for t in ortho_terms],
    )
    return total, report


def train_step(model: Model, batch: Batch, optimizer: AdamW, step: int) -> LossReport:
    """One forward/backward/update pass; frozen params are never touched."""
    store = model.store
    store.begin_step()
    total, report = forward_losses(model, batch, step)
    if not np.isfinite(total.data):
        raise FloatingPointError(
            f"non-finite loss at step {step}: task={report.task!r} aux={report.aux!r} "
            f"ortho={report.ortho!r}"
        )
    total.backward()
    optimizer.step(store)
    return report


def micro_config(size: str = "full") -> ExperimentConfig:
    """Tiny configuration for finite-difference verification of the loss."""
    if size == "small":
        # k = N: finite-difference perturbations cannot flip the selection
        return ExperimentConfig(
            n_experts=2, top_k=2, rank=1, layers=2, d_in=3, d_out=3, d_signal=3,
            d_inst=4, seq_len=2, inst_len=2, n_tasks=2, batch_size=2,
            policy=[{"layers": "0..1", "name": "igr"}], steps=1, seed=3,
        )
    return ExperimentConfig(
        n_experts=2, top_k=2, rank=2, layers=2, d_in=4, d_out=4, d_signal=4,
        d_inst=5, seq_len=3, inst_len=2, n_tasks=2, batch_size=2,
        policy=[{"layers": "0..1", "name": "igr"}], steps=1, seed=3,
    )


def micro_gradcheck(size: str = "full", eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Check reverse-mode gradients of the composite loss on a micro-model."""
    from .tensor import grad_check

    cfg = micro_config(size)
    model = Model(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    batch = sample_batch(model.suite, model.encoder, cfg.batch_size, cfg.seq_len, rng)
    step = cfg.ortho_warmup + 1

    def f(store):
        total, _ = forward_losses(model, batch, step)
        return total

    return grad_check(f, model.store, eps=eps, tol=tol)


# -- experiment runner -------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def snapshot_steps(total: int) -> list[int]:
    """Routing-log steps at roughly 1%, 10%, and 100% of training."""
    raw = [max(1, round(0.01 * total)), max(1, round(0.1 * total)), total]
    out: list[int] = []
    for s in raw:
        if s not in out:
            out.append(s)
    return out


def eval_task_loss(model: Model, n_instances: int = 512, chunk: int = 32) -> float:
    """Task loss on a fixed held-out stream shared by every policy.

    The stream's randomness is independent of the training seed, so two
    models trained on the same suite see identical evaluation data; this
    makes cross-policy comparisons paired rather than noise-dominated.
    """
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([424242]))
    losses = []
    for _ in range(max(1, n_instances // chunk)):
        batch = sample_batch(model.suite, model.encoder, chunk, cfg.seq_len, rng)
        model.store.begin_step()
        pred, _, _ = model.forward(batch)
        losses.append(task_loss(pred, batch.targets).item())
    return float(np.mean(losses))


def probe_batch(model: Model, reps: int = 4) -> Batch:
    """Fixed batch with ``reps`` instances per task, for routing diagnostics."""
    cfg = model.config
    task_ids = np.repeat(np.arange(cfg.n_tasks), reps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 991]))
    return sample_batch(model.suite, model.encoder, len(task_ids), cfg.seq_len, rng, task_ids)


def run_experiment(config: ExperimentConfig, out_dir, force: bool = False) -> Path:
    """Train a model per ``config`` and write the run directory.

    Layout: config.json, metrics.csv, routing/<layer>/<step>.csv,
    checkpoint.bin, summary.json. Deterministic given config + seed.
    """
    from .analysis import write_routing_snapshot, expert_gram, snapshot_metrics

    config.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"run directory {out} is not empty (use force)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "routing").mkdir(exist_ok=True)

    model = Model(config)
    optimizer = AdamW(model.store, config.lr, config.weight_decay)
    batch_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    config.save(out / "config.json")

    n_layers = config.layers
    header = ["step", "task", "aux", "ortho", "total"]
    header += [f"layer{i}_aux" for i in range(n_layers)]
    header += [f"layer{i}_ortho" for i in range(n_layers)]
    snaps = set(snapshot_steps(config.steps))
    dominant_history: list[tuple[int, list[list[int]]]] = []
    entropy_by_step: dict[int, list[list[float]]] = {}

    probe = probe_batch(model)
    metrics_lines = [",".join(header)]
    task_history: list[float] = []
    report = None
    for step in range(1, config.steps + 1):
        batch = sample_batch(model.suite, model.encoder, config.batch_size, config.seq_len, batch_rng)
        report = train_step(model, batch, optimizer, step)
        task_history.append(report.task)
        row = [str(step), _fmt(report.task), _fmt(report.aux), _fmt(report.ortho), _fmt(report.total)]
        row += [_fmt(v) for v in report.per_layer_aux]
        row += [_fmt(v) for v in report.per_layer_ortho]
        metrics_lines.append(",".join(row))

        if step in snaps or step % config.eval_every == 0 or step == config.steps:
            metrics = snapshot_metrics(model, probe)
            dominant_history.append((step, [m["dominant"] for m in metrics]))
            if step in snaps:
                entropy_by_step[step] = [m["entropy"] for m in metrics]
                for li, m in enumerate(metrics):
                    write_routing_snapshot(out / "routing" / str(li) / f"{step}.csv", m)

    (out / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")
    save_params(model.store, out / "checkpoint.bin")

    # specialization summary over the trailing 20% of evaluation points
    tail_n = max(1, math.ceil(0.2 * len(dominant_history)))
    tail = [d for _, d in dominant_history[-tail_n:]]
    stable = all(d == tail[0] for d in tail)
    first_snap, last_snap = min(entropy_by_step), max(entropy_by_step)
    entropy_drop = []
    for li in range(n_layers):
        e0 = float(np.mean(entropy_by_step[first_snap][li]))
        e1 = float(np.mean(entropy_by_step[last_snap][li]))
        entropy_drop.append(0.0 if e0 == 0 else (e0 - e1) / e0)
    gram = expert_gram(model, probe)
    off_diag_means = []
    for g in gram:
        n = g.shape[0]
        off = g[~np.eye(n, dtype=bool)]
        off_diag_means.append(float(np.nanmean(off)) if np.isfinite(off).any() else float("nan"))

    tail_window = max(1, config.steps // 10)
    summary = {
        "step1_task_loss": task_history[0],
        "eval_task_loss": eval_task_loss(model),
        "tail_mean_task_loss": float(np.mean(task_history[-tail_window:])),
        "final_task_loss": report.task,
        "final_total_loss": report.total,
        "final_aux_loss": report.aux,
        "final_ortho_loss": report.ortho,
        "entropy_first_step": first_snap,
        "entropy_last_step": last_snap,
        "entropy_drop_per_layer": entropy_drop,
        "max_entropy_drop": max(entropy_drop),
        "specialization_stable": stable,
        "dominant_experts": dominant_history[-1][1],
        "gram_offdiag_mean_per_layer": off_diag_means,
        "snapshot_steps": sorted(snaps),
        "logit_counts": {
            "igr": config.batch_size * config.n_experts,
            "token": config.batch_size * config.seq_len * config.n_experts,
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
