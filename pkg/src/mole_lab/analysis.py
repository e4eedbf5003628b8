"""Diagnostics: per-task routing distributions, entropy, expert Gram
matrices, and CSV snapshot round-tripping for the report command.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .routing import consistency, fragmentation
from .training import Batch, Model

__all__ = [
    "snapshot_metrics",
    "write_routing_snapshot",
    "read_routing_snapshot",
    "expert_gram",
    "entropy",
]


def entropy(p: np.ndarray) -> float:
    """Natural-log entropy of a distribution; 0 log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def snapshot_metrics(model: Model, probe: Batch) -> list[dict]:
    """Per-layer routing stats on a probe batch with known task labels.

    Each entry holds the T x N mean routing-weight distribution (rows sum
    to 1), per-task entropy, the dominant expert per task, and the
    decision's consistency and fragmentation.
    """
    model.store.begin_step()
    _, decisions, _ = model.forward(probe)
    n_tasks = int(probe.task_ids.max()) + 1
    out = []
    for decision in decisions:
        probs = decision.full_probs.data  # B x R x N
        n = probs.shape[-1]
        dist = np.zeros((n_tasks, n))
        for t in range(n_tasks):
            rows = probs[probe.task_ids == t].reshape(-1, n)
            dist[t] = rows.mean(axis=0)
        out.append(
            {
                "dist": dist,
                "entropy": [entropy(dist[t]) for t in range(n_tasks)],
                "log_n": float(np.log(n)),
                "dominant": [int(np.argmax(dist[t])) for t in range(n_tasks)],
                "consistency": consistency(decision, length=max(2, decision.indices.shape[1])),
                "fragmentation": fragmentation(decision),
            }
        )
    return out


def write_routing_snapshot(path, metrics: dict) -> None:
    """One layer's snapshot as CSV: task rows x expert columns plus stats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dist = metrics["dist"]
    n = dist.shape[1]
    header = ["task"] + [f"expert{i}" for i in range(n)]
    header += ["entropy", "log_n", "dominant", "consistency", "fragmentation"]
    lines = [",".join(header)]
    for t in range(dist.shape[0]):
        row = [str(t)] + [repr(float(v)) for v in dist[t]]
        row += [
            repr(float(metrics["entropy"][t])),
            repr(metrics["log_n"]),
            str(metrics["dominant"][t]),
            repr(float(metrics["consistency"])),
            repr(float(metrics["fragmentation"])),
        ]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def read_routing_snapshot(path) -> dict:
    """Parse a snapshot written by :func:`write_routing_snapshot`."""
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    n = sum(1 for h in header if h.startswith("expert"))
    dist, ent, dom = [], [], []
    cons = frag = log_n = 0.0
    for line in lines[1:]:
        cells = line.split(",")
        rec = dict(zip(header, cells))
        dist.append([float(rec[f"expert{i}"]) for i in range(n)])
        ent.append(float(rec["entropy"]))
        dom.append(int(rec["dominant"]))
        log_n = float(rec["log_n"])
        cons = float(rec["consistency"])
        frag = float(rec["fragmentation"])
    return {
        "dist": np.array(dist),
        "entropy": ent,
        "log_n": log_n,
        "dominant": dom,
        "consistency": cons,
        "fragmentation": frag,
    }


def expert_gram(model: Model, probe: Batch) -> list[np.ndarray]:
    """Per layer, the squared-cosine Gram matrix of expert outputs.

    Diagonal is 1; a zero-output expert yields a NaN-flagged row/column.
    """
    model.store.begin_step()
    _, _, expert_outs = model.forward(probe, with_expert_outputs=True)
    grams = []
    for outs in expert_outs:
        vecs = np.stack([o.data.reshape(-1) for o in outs])
        norms = np.linalg.norm(vecs, axis=1)
        n = len(outs)
        g = np.full((n, n), np.nan)
        ok = norms > 1e-12
        unit = np.zeros_like(vecs)
        unit[ok] = vecs[ok] / norms[ok, None]
        sub = unit[ok] @ unit[ok].T
        g[np.ix_(ok, ok)] = sub**2
        np.fill_diagonal(g, 1.0)
        grams.append(g)
    return grams
