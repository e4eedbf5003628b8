import numpy as np
import pytest
from sklearn.base import clone

from mole_lab.estimator import MoLERegressor
from mole_lab.experts import ConfigError


def _task_data(n=48, seq=3, d=6, n_tasks=2, seed=0):
    """Per-task linear maps, matching the estimator's training distribution."""
    rng = np.random.default_rng(seed)
    maps = [np.linalg.qr(rng.normal(size=(d, d)))[0] for _ in range(n_tasks)]
    task_ids = rng.integers(0, n_tasks, size=n)
    X = rng.normal(size=(n, seq, d))
    y = np.stack([X[i] @ maps[task_ids[i]] for i in range(n)])
    return X, y, task_ids


def _small(**kw):
    base = dict(n_experts=4, top_k=2, rank=4, layers=2, steps=60, batch_size=8,
                lr=3e-3, random_state=0)
    base.update(kw)
    return MoLERegressor(**base)


class TestSklearnContract:
    def test_get_set_params(self):
        est = _small()
        params = est.get_params()
        assert params["n_experts"] == 4
        est.set_params(top_k=1)
        assert est.top_k == 1

    def test_clone(self):
        est = _small(steps=3)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert not hasattr(c, "model_")

    def test_unfitted_predict_raises(self):
        with pytest.raises(ConfigError):
            _small().predict(np.zeros((2, 3, 6)))


class TestFitPredict:
    def test_fit_predict_shapes(self):
        X, y, task_ids = _task_data()
        est = _small(steps=10).fit(X, y, task_ids=task_ids)
        pred = est.predict(X[:5], task_ids=task_ids[:5])
        assert pred.shape == y[:5].shape

    def test_2d_input_promoted(self):
        X, y, task_ids = _task_data(seq=1)
        est = _small(steps=5).fit(X[:, 0, :], y[:, 0, :], task_ids=task_ids)
        pred = est.predict(X[:4, 0, :], task_ids=task_ids[:4])
        assert pred.shape == (4, 1, 6)

    def test_learns_task_maps(self):
        X, y, task_ids = _task_data(n=64)
        est = _small(steps=250).fit(X, y, task_ids=task_ids)
        score = est.score(X, y, task_ids=task_ids)
        assert score > 0.5

    def test_deterministic_given_state(self):
        X, y, task_ids = _task_data()
        p1 = _small(steps=15).fit(X, y, task_ids=task_ids).predict(X[:4], task_ids=task_ids[:4])
        p2 = _small(steps=15).fit(X, y, task_ids=task_ids).predict(X[:4], task_ids=task_ids[:4])
        assert np.array_equal(p1, p2)

    def test_default_task_ids(self):
        X, y, _ = _task_data(n_tasks=1)
        est = _small(steps=5).fit(X, y)
        pred = est.predict(X[:3])
        assert pred.shape == y[:3].shape


class TestValidation:
    def test_nan_rejected(self):
        X, y, task_ids = _task_data()
        X[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            _small().fit(X, y, task_ids=task_ids)

    def test_shape_mismatch_rejected(self):
        X, y, task_ids = _task_data()
        with pytest.raises(ValueError):
            _small().fit(X, y[:10], task_ids=task_ids)

    def test_bad_task_ids_rejected(self):
        X, y, task_ids = _task_data()
        with pytest.raises(ValueError):
            _small().fit(X, y, task_ids=task_ids[:5])

    def test_out_of_range_predict_ids(self):
        X, y, task_ids = _task_data()
        est = _small(steps=5).fit(X, y, task_ids=task_ids)
        with pytest.raises(ConfigError):
            est.predict(X[:2], task_ids=np.array([0, 9]))
