"""Central finite-difference oracle for the analytic loss gradients."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError, OracleFailure
from .linalg import as_matrix, cosine_parts
from .losses import LOSSES, LossConfig, compute_loss, rank_weights
from .partition import partition_queries

BOUNDARY_GAP = 1e-4
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class GradCheckReport:
    """Worst-case agreement between analytic and finite-difference gradients.

    ``max_rel_error`` is, per instance, the largest absolute coordinate error
    divided by the largest gradient magnitude (either route), maximized over
    trials. ``worst_coordinate`` locates ``max_abs_error``'s instance entry.
    """

    loss: str
    trials: int
    tolerance: float
    max_rel_error: float
    max_abs_error: float
    worst_coordinate: tuple
    boundary_resamples: int
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["worst_coordinate"] = list(self.worst_coordinate)
        return d


def _loss_fn(loss, p, cfg):
    if callable(loss):
        return lambda x: loss(x, p, cfg).value
    if loss not in LOSSES:
        raise InvalidInputError(f"unknown loss {loss!r}")
    return lambda x: compute_loss(loss, x, p, cfg).value


def finite_difference_gradient(loss, q, p, cfg=LossConfig(), step=1e-5):
    """Central-difference gradient ``(L(q + h e) - L(q - h e)) / 2h`` per coordinate.

    ``loss`` is a registry name or any callable ``(q, p, cfg) -> LossResult``.
    """
    if not 1e-8 <= step <= 1e-2:
        raise ConfigurationError(f"step must lie in [1e-8, 1e-2], got {step}")
    q = as_matrix(q, "query matrix")
    f = _loss_fn(loss, p, cfg)
    grad = np.zeros_like(q)
    x = q.copy()
    for idx in np.ndindex(q.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite loss when perturbing coordinate {idx}",
                                coordinate=idx)
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def boundary_distance(loss, q, p, cfg=LossConfig()):
    """Smallest distance of any pair to a point where ``loss`` is non-smooth.

    Covers the truncation at cos=0, the ``1 - eps`` clamp, the IMC margin mask
    and rank swaps, and the OCA threshold indicator. Returns ``inf`` for
    everywhere-smooth losses.
    """
    if loss == "iic":
        return np.inf
    c = cosine_parts(q).cosine
    eps = cfg.eps_clamp
    intra, inter = p.same_class, p.other_class
    used = {"ime": inter, "imc": intra, "mmcl": intra | inter}.get(loss, intra | inter)
    vals = c[used]
    if vals.size == 0:
        return np.inf
    dist = min(np.min(np.abs(vals)), np.min(np.abs(vals - eps)),
               np.min(np.abs(vals - (1.0 - eps))))
    if loss in ("imc", "mmcl") and intra.any():
        s = np.clip(c, eps, 1.0 - eps)
        w = rank_weights(s, p, cfg.alpha)
        contrib = -w[intra] * np.log(s[intra])
        dist = min(dist, np.min(np.abs(contrib - cfg.margin)))
        for k in range(p.classes):
            sl = p.group_slice(k)
            n = sl.stop - sl.start
            if n < 3:
                continue
            iu = np.triu_indices(n, 1)
            v = np.sort(c[sl, sl][iu])
            dist = min(dist, np.min(np.diff(v)))
    if loss == "oca" and intra.any():
        dist = min(dist, np.min(np.abs(c[intra] - cfg.tau)))
    return float(dist)


def random_instance(rng):
    """Random (q, partition) with N in [4, 30], D in [2, 16], K in [2, 5].

    Rows share a per-class center so intra-class similarities are mostly
    positive and the attraction terms are active. Row norms are drawn from
    [2, 4]; tiny rows inflate the O(h^2) difference error.
    """
    k = int(rng.integers(2, 6))
    n = int(rng.integers(max(4, k), 31))
    d = int(rng.integers(2, 17))
    p = partition_queries(n, k)
    centers = rng.normal(size=(k, d))
    q = 0.8 * centers[p.group_of] + rng.normal(size=(n, d))
    q *= rng.uniform(2.0, 4.0, size=(n, 1)) / np.linalg.norm(q, axis=1, keepdims=True)
    return q, p


def verify_gradient(loss, trials=50, seed=0, tolerance=1e-5, cfg=LossConfig(), step=1e-5):
    """Compare analytic and finite-difference gradients on random instances."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    if loss not in LOSSES:
        raise InvalidInputError(f"unknown loss {loss!r}")
    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_abs = 0.0
    worst_coord = (0, 0)
    resamples = 0
    for _ in range(trials):
        for attempt in range(MAX_RESAMPLES):
            q, p = random_instance(rng)
            if boundary_distance(loss, q, p, cfg) > BOUNDARY_GAP:
                break
            resamples += 1
        else:
            raise ConfigurationError(
                f"{loss}: no boundary-free instance within {MAX_RESAMPLES} attempts")
        analytic = compute_loss(loss, q, p, cfg).gradient
        numeric = finite_difference_gradient(loss, q, p, cfg, step)
        err = np.abs(analytic - numeric)
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
        abs_err = float(err.max())
        rel = abs_err / scale if scale > 0 else abs_err
        worst_rel = max(worst_rel, rel)
        if abs_err >= worst_abs:
            worst_abs = abs_err
            worst_coord = tuple(int(i) for i in np.unravel_index(np.argmax(err), err.shape))
    return GradCheckReport(
        loss=loss, trials=trials, tolerance=tolerance,
        max_rel_error=worst_rel, max_abs_error=worst_abs, worst_coordinate=worst_coord,
        boundary_resamples=resamples, passed=bool(worst_rel < tolerance))
