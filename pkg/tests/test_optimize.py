import numpy as np
import pytest

from mmcl.errors import ConfigurationError, NonFiniteLossError
from mmcl.optim import SGD, Adam, make_optimizer
from mmcl.optimize import (TRAJECTORY_COLUMNS, collapsed_queries, optimize_queries,
                           random_queries)
from mmcl.partition import partition_queries
from mmcl.metrics import homogeneity_coefficient


def test_sgd_step():
    params = {"w": np.array([1.0, 2.0])}
    SGD(0.5).step(params, {"w": np.array([2.0, -2.0])})
    np.testing.assert_array_equal(params["w"], [0.0, 3.0])


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, 1.0, 1.0])}
    Adam(0.1).step(params, {"w": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(params["w"], [0.9, 1.1, 1.0], atol=1e-6)


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    opt = Adam(0.1)
    for _ in range(500):
        opt.step(params, {"w": 2 * params["w"]})
    assert np.all(np.abs(params["w"]) < 1e-2)


def test_make_optimizer_errors():
    with pytest.raises(ConfigurationError):
        make_optimizer("rmsprop", 0.1)
    with pytest.raises(ConfigurationError):
        make_optimizer("sgd", -1.0)


def test_inits():
    rng = np.random.default_rng(0)
    p = partition_queries(30, 5)
    assert homogeneity_coefficient(collapsed_queries(30, 16, rng), p) > 0.9
    assert homogeneity_coefficient(random_queries(30, 16, rng), p) < 0.3


def test_trajectory_shape_and_determinism():
    rng = np.random.default_rng(1)
    p = partition_queries(10, 2)
    q0 = random_queries(10, 4, rng)
    qa, rows = optimize_queries(q0, p, iterations=5)
    qb, rows_b = optimize_queries(q0, p, iterations=5)
    assert len(rows) == 6 and rows == rows_b
    np.testing.assert_array_equal(qa, qb)
    assert [r.iteration for r in rows] == list(range(6))
    assert len(rows[0].as_tuple()) == len(TRAJECTORY_COLUMNS)
    np.testing.assert_array_equal(q0, random_queries(10, 4, np.random.default_rng(1)))


def test_loss_decreases():
    rng = np.random.default_rng(2)
    p = partition_queries(12, 3)
    _, rows = optimize_queries(random_queries(12, 6, rng), p, iterations=100)
    assert rows[-1].loss < rows[0].loss


def test_iterations_validated():
    with pytest.raises(ConfigurationError):
        optimize_queries(np.eye(2), partition_queries(2, 2), iterations=0)


def test_divergence_aborts(monkeypatch):
    import mmcl.optimize as opt_mod
    from mmcl.losses import LossResult

    monkeypatch.setattr(opt_mod, "compute_loss",
                        lambda name, q, p, cfg: LossResult(1e13, np.zeros_like(q)))
    with pytest.raises(NonFiniteLossError):
        optimize_queries(np.eye(2), partition_queries(2, 2), iterations=3)
