"""Split N queries into K contiguous class groups.

With ``n = N // K`` and ``r = N - K * n``, the first ``r`` groups receive
``n + 1`` queries and the remaining groups ``n``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class PartitionSpec:
    total_queries: int
    classes: int
    group_sizes: tuple

    def __post_init__(self):
        if sum(self.group_sizes) != self.total_queries:
            raise InvalidInputError("group sizes do not sum to the query count")
        if len(self.group_sizes) != self.classes:
            raise InvalidInputError("one group size is required per class")

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(int)

    @cached_property
    def group_of(self):
        """Class index of every query, shape (N,)."""
        return np.repeat(np.arange(self.classes), self.group_sizes)

    def group_slice(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    @cached_property
    def same_class(self):
        """Boolean N x N mask of ordered intra-class off-diagonal pairs."""
        g = self.group_of
        mask = g[:, None] == g[None, :]
        np.fill_diagonal(mask, False)
        return mask

    @cached_property
    def other_class(self):
        """Boolean N x N mask of ordered inter-class pairs."""
        g = self.group_of
        return g[:, None] != g[None, :]

    def check_rows(self, n_rows):
        if n_rows != self.total_queries:
            raise InvalidInputError(
                f"partition expects {self.total_queries} queries, got {n_rows}")


def partition_queries(n_queries, n_classes):
    """Contiguous even split of ``n_queries`` into ``n_classes`` groups."""
    if n_queries < 1 or n_classes < 1:
        raise InvalidInputError(
            f"need at least one query and one class, got N={n_queries}, K={n_classes}")
    if n_classes > n_queries:
        raise ConfigurationError(
            f"K={n_classes} > N={n_queries}: some class would receive no queries")
    n, r = divmod(n_queries, n_classes)
    sizes = tuple([n + 1] * r + [n] * (n_classes - r))
    return PartitionSpec(total_queries=n_queries, classes=n_classes, group_sizes=sizes)
