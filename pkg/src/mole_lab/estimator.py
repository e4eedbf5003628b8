"""Scikit-learn-style front end: a regressor whose hidden layers are
mixtures of low-rank experts routed by a per-instance task instruction.

``fit(X, y, task_ids=...)`` trains the adapters and router on sequences
``X`` (batch x tokens x features) against targets ``y``; ``predict``
routes new instances by their task instruction. Hyper-parameters follow
the sklearn ``get_params``/``set_params`` contract, so the estimator
composes with model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .experts import ConfigError
from .training import AdamW, Batch, ExperimentConfig, Model, train_step
from .tensor import Tensor
from .validation import check_input_tensor, check_task_ids

__all__ = ["MoLERegressor"]


class MoLERegressor(BaseEstimator, RegressorMixin):
    """Frozen random backbone + trainable routed LoRA experts."""

    def __init__(
        self,
        n_experts: int = 8,
        top_k: int = 4,
        rank: int = 8,
        layers: int = 2,
        policy: str = "igr",
        signal_mode: str = "full",
        lambda_aux: float = 0.01,
        lambda_ortho: float = 0.1,
        lr: float = 3e-3,
        weight_decay: float = 1e-4,
        steps: int = 500,
        batch_size: int = 8,
        random_state: int = 0,
    ):
        self.n_experts = n_experts
        self.top_k = top_k
        self.rank = rank
        self.layers = layers
        self.policy = policy
        self.signal_mode = signal_mode
        self.lambda_aux = lambda_aux
        self.lambda_ortho = lambda_ortho
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, d_in: int, d_out: int, seq_len: int, n_tasks: int) -> ExperimentConfig:
        return ExperimentConfig(
            n_experts=self.n_experts,
            top_k=self.top_k,
            rank=min(self.rank, d_in, d_out),
            layers=self.layers,
            d_in=d_in,
            d_out=d_out,
            seq_len=seq_len,
            n_tasks=max(2, n_tasks),
            policy=[{"layers": f"0..{self.layers - 1}", "name": self.policy}],
            signal_mode=self.signal_mode,
            lambda_aux=self.lambda_aux,
            lambda_ortho=self.lambda_ortho,
            lr=self.lr,
            weight_decay=self.weight_decay,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, X, y, task_ids=None):
        X = check_input_tensor(X, "X")
        y = check_input_tensor(y, "y")
        if X.shape[:2] != y.shape[:2]:
            raise ValueError(f"X {X.shape} and y {y.shape} disagree on batch/tokens")
        n = X.shape[0]
        if task_ids is None:
            task_ids = np.zeros(n, dtype=np.int64)
        task_ids = check_task_ids(task_ids, n, max(2, int(np.max(task_ids)) + 1))

        cfg = self._config(X.shape[2], y.shape[2], X.shape[1], int(task_ids.max()) + 1)
        self.model_ = Model(cfg)
        self.config_ = cfg
        optimizer = AdamW(self.model_.store, cfg.lr, cfg.weight_decay)
        rng = np.random.default_rng(self.random_state)
        b = min(cfg.batch_size, n)
        for step in range(1, cfg.steps + 1):
            pick = rng.choice(n, size=b, replace=False)
            batch = self._batch(X[pick], task_ids[pick], y[pick])
            train_step(self.model_, batch, optimizer, step)
        return self

    def _batch(self, X: np.ndarray, task_ids: np.ndarray, y=None) -> Batch:
        suite = self.model_.suite
        templates = [suite[t].template for t in task_ids]
        encoding = self.model_.encoder.encode(templates)
        targets = y if y is not None else np.zeros((X.shape[0], X.shape[1], self.config_.d_out))
        return Batch(Tensor(X, check=False), Tensor(targets, check=False), encoding, task_ids)

    def predict(self, X, task_ids=None):
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted")
        X = check_input_tensor(X, "X")
        n = X.shape[0]
        if task_ids is None:
            task_ids = np.zeros(n, dtype=np.int64)
        task_ids = check_task_ids(task_ids, n, self.config_.n_tasks)
        self.model_.store.begin_step()
        pred, _, _ = self.model_.forward(self._batch(X, task_ids))
        return pred.data.copy()

    def score(self, X, y, task_ids=None):
        """R^2 over all flattened output elements."""
        y = check_input_tensor(y, "y")
        pred = self.predict(X, task_ids)
        ss_res = float(((y - pred) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
