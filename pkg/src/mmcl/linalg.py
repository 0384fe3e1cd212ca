"""Dense matrix kernels: row normalization and truncated cosine similarity.

Matrices are plain 2-D float64 numpy arrays. ``as_matrix`` is the single
validation point; everything downstream assumes its invariants.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError

EPS_NORM = 1e-12
EPS_CLAMP = 1e-7


def as_matrix(data, name="matrix"):
    """Validate ``data`` as a finite 2-D float array with nonzero dimensions."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidInputError(f"{name} has a zero dimension: {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return m


def row_normalize(m):
    """Scale each row to unit L2 norm.

    Rows with norm <= 1e-12 are returned unchanged. Returns
    ``(normalized, zero_rows)`` where ``zero_rows`` is a boolean mask of the
    rows left untouched.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    zero_rows = norms <= EPS_NORM
    safe = np.where(zero_rows, 1.0, norms)
    return m / safe[:, None], zero_rows


@dataclass(frozen=True)
class SimilarityTensor:
    """Flat N x N truncated cosine matrix, optionally tagged with a partition.

    ``values[a, b]`` lies in [0, 1]; block ``(k1, k2)`` holds the pairs between
    class groups k1 and k2 when a partition is attached.
    """

    values: np.ndarray
    partition: Optional[object] = None

    def block(self, k1, k2):
        if self.partition is None:
            raise InvalidInputError("similarity tensor has no partition attached")
        r1 = self.partition.group_slice(k1)
        r2 = self.partition.group_slice(k2)
        return self.values[r1, r2]

    def __getitem__(self, idx):
        return self.values[idx]


@dataclass(frozen=True)
class CosineParts:
    """Intermediates of the cosine computation, kept for the backward pass."""

    unit: np.ndarray  # row-normalized queries (zero rows stay zero)
    norms: np.ndarray
    zero_rows: np.ndarray
    cosine: np.ndarray  # signed cosine, 0 for pairs touching a zero row


def cosine_parts(q):
    q = as_matrix(q, "query matrix")
    norms = np.linalg.norm(q, axis=1)
    zero_rows = norms <= EPS_NORM
    unit = np.where(zero_rows[:, None], 0.0, q / np.where(zero_rows, 1.0, norms)[:, None])
    cos = unit @ unit.T
    # exact unit diagonal; round-off can push it a hair above 1
    idx = np.arange(q.shape[0])
    cos[idx, idx] = np.where(zero_rows, 0.0, 1.0)
    np.clip(cos, -1.0, 1.0, out=cos)
    return CosineParts(unit=unit, norms=norms, zero_rows=zero_rows, cosine=cos)


def cosine_similarity(q, partition=None):
    """Truncated cosine similarity ``max(0, cos)`` between all rows of ``q``.

    Pairs involving a zero-norm row are 0. The upper ``1 - eps`` clamp is not
    applied here; losses apply it before taking logarithms.
    """
    parts = cosine_parts(q)
    return SimilarityTensor(values=np.maximum(parts.cosine, 0.0), partition=partition)


def clamp_similarity(s, eps=EPS_CLAMP, floor=0.0):
    """Clamp similarities into ``[floor, 1 - eps]``."""
    return np.clip(s, floor, 1.0 - eps)


def cosine_backward(parts, grad_cos):
    """Pull a gradient w.r.t. the cosine matrix back to the query matrix.

    ``grad_cos[a, b]`` is dL/dcos(a, b) treating every entry as independent.
    Zero rows receive zero gradient.
    """
    g = np.asarray(grad_cos, dtype=np.float64)
    unit = parts.unit
    g_unit = g @ unit + g.T @ unit
    # project out the radial component, then undo the normalization
    radial = np.sum(g_unit * unit, axis=1, keepdims=True)
    safe = np.where(parts.zero_rows, 1.0, parts.norms)[:, None]
    grad = (g_unit - radial * unit) / safe
    grad[parts.zero_rows] = 0.0
    return grad
