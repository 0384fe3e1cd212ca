"""Exact minimum-cost bipartite assignment (Hungarian method).

Rows are predictions, columns ground-truth objects. The solver works on the
orientation with fewer rows than columns, so no sentinel padding is needed:
every row is matched and ``min(rows, cols)`` pairs come out.

Ties are resolved to the lexicographically smallest pair list (pairs sorted by
prediction index). Alternative optima are exactly the matchings inside the
tight subgraph of the optimal dual that also cover every column with a
strictly negative dual, so the canonical one is found greedily there.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class Assignment:
    pairs: tuple  # ((prediction, ground_truth), ...) sorted by prediction
    unmatched_predictions: tuple
    total_cost: float


def _hungarian(c):
    """Shortest augmenting path solver for ``n <= m``.

    Returns ``(row_to_col, u, v)`` with duals satisfying
    ``c[i, j] - u[i] - v[j] >= 0`` and ``v <= 0``.
    """
    n, m = c.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    cost = np.zeros((n + 1, m + 1))
    cost[1:, 1:] = c
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _augment(adj, a, match_b, seen):
    for b in adj[a]:
        if b in seen:
            continue
        seen.add(b)
        if match_b.get(b) is None or _augment(adj, match_b[b], match_b, seen):
            match_b[b] = a
            return True
    return False


def _covers(adj, must):
    """True if some matching in ``adj`` (dict a -> list of b) saturates ``must``."""
    match_b = {}
    return all(_augment(adj, a, match_b, set()) for a in must)


def _canonical(tight, must_pred, must_gt):
    """Lexicographically smallest optimal pair list inside the tight graph."""
    n_pred, n_gt = tight.shape
    free_gt = set(range(n_gt))
    open_pred = set(range(n_pred))
    pairs = []

    def feasible():
        fwd = {a: [b for b in np.flatnonzero(tight[a]) if b in free_gt] for a in open_pred}
        bwd = {b: [a for a in np.flatnonzero(tight[:, b]) if a in open_pred] for b in free_gt}
        return (_covers(fwd, sorted(must_pred & open_pred))
                and _covers(bwd, sorted(must_gt & free_gt)))

    for a in range(n_pred):
        open_pred.discard(a)
        chosen = None
        for b in np.flatnonzero(tight[a]):
            b = int(b)
            if b not in free_gt:
                continue
            free_gt.discard(b)
            if feasible():
                chosen = b
                break
            free_gt.add(b)
        if chosen is not None:
            pairs.append((a, chosen))
    return pairs


def solve_assignment(cost):
    """Minimum-cost assignment of size ``min(rows, cols)``."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise InvalidInputError(f"cost matrix must be 2-D and non-empty, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix contains NaN or Inf")
    rows, cols = c.shape
    flipped = rows > cols
    work = c.T if flipped else c
    small_to_large, u, v = _hungarian(work)

    tol = 1e-11 * max(1.0, float(np.max(np.abs(c))))
    tight_w = np.abs(work - u[:, None] - v[None, :]) <= tol
    if np.all(tight_w.sum(axis=1) == 1):
        match = [(i, int(j)) for i, j in enumerate(small_to_large)]
    else:
        # "must" vertices: the whole smaller side plus larger-side vertices
        # whose dual is strictly negative
        must_small = set(range(work.shape[0]))
        must_large = set(np.flatnonzero(v < -tol).tolist())
        if flipped:
            match = [(j, i) for i, j in _canonical(tight_w.T, must_large, must_small)]
        else:
            match = _canonical(tight_w, must_small, must_large)
    if flipped:
        pairs = sorted((int(j), int(i)) for i, j in match)
    else:
        pairs = sorted((int(i), int(j)) for i, j in match)
    matched = {a for a, _ in pairs}
    return Assignment(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(a for a in range(rows) if a not in matched),
        total_cost=math.fsum(c[a, b] for a, b in pairs),
    )
