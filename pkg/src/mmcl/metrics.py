"""Distribution diagnostics for partitioned query sets.

Absent values (no valid pairs, no matches) are returned as ``None``.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .linalg import cosine_parts
from .losses import LossConfig, rank_weights
from .matcher import solve_assignment


def _pair_sims(q, signed):
    c = cosine_parts(q).cosine
    return c if signed else np.maximum(c, 0.0)


def per_class_homogeneity(q, p, signed=False):
    """Mean intra-class similarity per group; ``None`` for singleton groups."""
    s = _pair_sims(q, signed)
    out = []
    for k in range(p.classes):
        sl = p.group_slice(k)
        n = sl.stop - sl.start
        if n < 2:
            out.append(None)
            continue
        block = s[sl, sl]
        out.append(float((block.sum() - np.trace(block)) / (n * (n - 1))))
    return out


def homogeneity_coefficient(q, p, signed=False):
    """Average truncated cosine similarity over intra-class ordered pairs.

    1 means every group has collapsed to a single direction. Pass
    ``signed=True`` to average the raw cosine instead.
    """
    p.check_rows(np.shape(q)[0])
    mask = p.same_class
    if not mask.any():
        return None
    return float(_pair_sims(q, signed)[mask].mean())


def interclass_similarity(q, p):
    """Average truncated cosine similarity over inter-class ordered pairs."""
    p.check_rows(np.shape(q)[0])
    mask = p.other_class
    if not mask.any():
        return None
    return float(_pair_sims(q, False)[mask].mean())


def margin_satisfaction(q, p, cfg=LossConfig()):
    """Fraction of intra-class pairs already inside the margin (``-w log s < m``)."""
    p.check_rows(np.shape(q)[0])
    mask = p.same_class
    if not mask.any():
        return None
    eps = cfg.eps_clamp
    s = np.clip(cosine_parts(q).cosine, eps, 1.0 - eps)
    w = rank_weights(s, p, cfg.alpha)
    inside = -w[mask] * np.log(s[mask]) < cfg.margin
    return float(inside.mean())


def group_class_consistency(matches, p, group_classes=None):
    """Fraction of matched (query, object class) pairs where the class is the query's group class.

    ``matches`` is an iterable of ``(query_index, object_class)``.
    ``group_classes[k]`` maps group k to a class; the identity by default.
    """
    matches = list(matches)
    if not matches:
        return None
    g = p.group_of
    mapping = np.arange(p.classes) if group_classes is None else np.asarray(group_classes)
    hits = sum(int(mapping[g[qi]] == cls) for qi, cls in matches)
    return hits / len(matches)


def align_groups(matches, p, n_classes=None):
    """One-to-one group -> class mapping that maximizes agreement with ``matches``.

    Groups specialize to whichever class training pushes them toward; this
    recovers that preference with an optimal bijection so consistency can be
    measured independently of the arbitrary group labelling.
    """
    n_classes = p.classes if n_classes is None else n_classes
    counts = np.zeros((p.classes, n_classes))
    g = p.group_of
    for qi, cls in matches:
        counts[g[qi], cls] += 1
    if n_classes < p.classes:
        raise ValueError("need at least as many classes as groups to align")
    assignment = solve_assignment(-counts)
    mapping = np.empty(p.classes, dtype=int)
    for k, cls in assignment.pairs:
        mapping[k] = cls
    return mapping


@dataclass(frozen=True)
class MetricsReport:
    homogeneity: Optional[float]
    per_class_homogeneity: list
    inter_class_mean_sim: Optional[float]
    margin_satisfied_fraction: Optional[float]
    group_class_consistency: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def metrics_report(q, p, cfg=LossConfig(), matches=None):
    return MetricsReport(
        homogeneity=homogeneity_coefficient(q, p),
        per_class_homogeneity=per_class_homogeneity(q, p),
        inter_class_mean_sim=interclass_similarity(q, p),
        margin_satisfied_fraction=margin_satisfaction(q, p, cfg),
        group_class_consistency=(None if matches is None
                                 else group_class_consistency(matches, p)),
    )
