"""Query-anchored mini-batches: q queries, their nearest neighbours, and M random fillers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DatasetTooSmall
from .numeric import Rng


@dataclass(frozen=True)
class BatchConfig:
    q: int = 12
    k_batch: int = 8
    m: int = 32

    def __post_init__(self):
        if self.q < 1 or self.k_batch < 1 or self.m < 0:
            raise ValueError("need q >= 1, k_batch >= 1, m >= 0")

    @property
    def size(self) -> int:
        return self.q * self.k_batch + self.m


@dataclass
class BatchPlan:
    query_indices: np.ndarray
    neighbor_indices: list[np.ndarray]
    filler_indices: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        """Flattened order: queries, then each query's neighbour group, then fillers."""
        return np.concatenate([self.query_indices, *self.neighbor_indices, self.filler_indices]).astype(np.int64)

    def __len__(self):
        return self.indices.size


def build_batch(neighbor_index: np.ndarray, q: int, k_batch: int, m: int, rng: Rng) -> BatchPlan:
    """Sample one batch plan of ``q * k_batch + m`` distinct dataset indices.

    ``neighbor_index[i]`` lists dataset rows nearest-first. A neighbour that
    is already in the batch is replaced by the next unused one further down
    the list.
    """
    neighbor_index = np.asarray(neighbor_index)
    n = neighbor_index.shape[0]
    need = q * k_batch + m
    if n < need:
        raise DatasetTooSmall(f"dataset has {n} rows, batch needs {need}")
    if k_batch > 1 and (neighbor_index.ndim != 2 or neighbor_index.shape[1] < k_batch - 1):
        raise DatasetTooSmall(f"neighbour index needs >= {k_batch - 1} entries per row")

    queries = rng.choice(n, size=q, replace=False)
    used = np.zeros(n, dtype=bool)
    used[queries] = True
    groups = []
    for qi in queries:
        group = []
        if k_batch > 1:
            for j in neighbor_index[qi]:
                if not used[j]:
                    group.append(int(j))
                    used[j] = True
                    if len(group) == k_batch - 1:
                        break
            if len(group) < k_batch - 1:
                raise DatasetTooSmall(f"neighbour list of query {int(qi)} exhausted; build a deeper index")
        groups.append(np.asarray(group, dtype=np.int64))
    free = np.flatnonzero(~used)
    fillers = rng.choice(free, size=m, replace=False) if m else np.zeros(0, dtype=np.int64)
    return BatchPlan(np.asarray(queries, dtype=np.int64), groups, np.asarray(fillers, dtype=np.int64))


def index_depth(cfg: BatchConfig, n: int) -> int:
    """Neighbour-list depth that cannot be exhausted by duplicate skipping."""
    return min(n - 1, cfg.q * cfg.k_batch + cfg.k_batch)
