"""Input validation helpers shared by the estimator front end."""

from __future__ import annotations

import numpy as np

from .experts import ConfigError


def check_input_tensor(x, name: str = "X") -> np.ndarray:
    """Validate a B x L x D float array: finite, 3 axes, non-empty."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, None, :]  # single-token sequences
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (batch, tokens, features), got {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_instructions(instructions, n_instances: int) -> list[list[int]]:
    """Validate per-instance token-id lists."""
    rows = [list(map(int, row)) for row in instructions]
    if len(rows) != n_instances:
        raise ValueError(f"got {len(rows)} instructions for {n_instances} instances")
    if any(len(r) < 1 for r in rows):
        raise ValueError("each instruction needs at least one token")
    return rows


def check_task_ids(task_ids, n_instances: int, n_tasks: int) -> np.ndarray:
    ids = np.asarray(task_ids, dtype=np.int64)
    if ids.shape != (n_instances,):
        raise ValueError(f"task_ids must have shape ({n_instances},), got {ids.shape}")
    if ids.min() < 0 or ids.max() >= n_tasks:
        raise ConfigError(f"task ids must lie in [0, {n_tasks})")
    return ids
