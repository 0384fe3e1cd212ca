"""Direct optimization of a free query matrix under one contrastive loss.

No decoder is involved: the queries themselves are the parameters. Used to
trace how each loss reshapes the intra-/inter-class geometry.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NonFiniteLossError
from .losses import LossConfig, compute_loss
from .metrics import homogeneity_coefficient, interclass_similarity, margin_satisfaction
from .optim import make_optimizer

DIVERGENCE_LIMIT = 1e12
TRAJECTORY_COLUMNS = ("iteration", "loss", "homogeneity", "interclass_similarity",
                      "margin_satisfaction")


def random_queries(n, d, rng):
    """Isotropic Gaussian queries; intra-class similarity near chance."""
    return rng.normal(size=(n, d))


def collapsed_queries(n, d, rng, spread=0.05):
    """All queries jittered around a single shared direction."""
    base = rng.normal(size=d)
    base /= np.linalg.norm(base)
    return base[None, :] + spread * rng.normal(size=(n, d))


@dataclass(frozen=True)
class TrajectoryRow:
    iteration: int
    loss: float
    homogeneity: float
    interclass_similarity: float
    margin_satisfaction: float

    def as_tuple(self):
        return (self.iteration, self.loss, self.homogeneity, self.interclass_similarity,
                self.margin_satisfaction)


def optimize_queries(q0, p, loss="mmcl", cfg=LossConfig(), iterations=200, lr=0.01,
                     optimizer="adam"):
    """Run ``iterations`` descent steps on ``q0``; returns ``(q_final, rows)``.

    Row ``i`` describes the queries before step ``i``; the last row describes
    the final matrix, so there are ``iterations + 1`` rows.
    """
    if iterations < 1:
        raise ConfigurationError("iterations must be >= 1")
    params = {"q": np.array(q0, dtype=np.float64)}
    opt = make_optimizer(optimizer, lr)
    rows = []
    for it in range(iterations + 1):
        q = params["q"]
        res = compute_loss(loss, q, p, cfg)
        if not np.isfinite(res.value) or abs(res.value) > DIVERGENCE_LIMIT:
            raise NonFiniteLossError(
                f"{loss} diverged at iteration {it}: value {res.value}", term=loss)
        rows.append(TrajectoryRow(it, res.value, homogeneity_coefficient(q, p),
                                  interclass_similarity(q, p), margin_satisfaction(q, p, cfg)))
        if it < iterations:
            opt.step(params, {"q": res.gradient})
    return params["q"], rows
