"""Neighbourhood and cluster context: kNN, k-reciprocal sets, pair labels, prototypes.

Ties are always broken toward the smaller index so every result is a pure
function of its inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSum, KTooLarge, ShapeMismatch

DEGENERATE_NORM = 1e-12


def distance_matrix(x: np.ndarray, metric: str = "cosine") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if metric == "cosine":
        # rows are assumed unit-norm
        return 1.0 - x @ x.T
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))
    raise ValueError(f"unknown metric {metric!r}")


def knn(embeddings: np.ndarray, k: int, metric: str = "cosine") -> np.ndarray:
    """``(N, k)`` array of each row's k nearest other rows, nearest first."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise KTooLarge(f"k={k} must lie in [1, N-1] for N={n}")
    d = distance_matrix(x, metric)
    np.fill_diagonal(d, np.inf)
    # stable sort keeps index order among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def k_reciprocal(knn_lists) -> list[frozenset]:
    """Sets of mutual neighbours: ``j in R(i)`` iff ``j in N(i)`` and ``i in N(j)``."""
    neigh = [set(int(j) for j in row) for row in knn_lists]
    return [frozenset(j for j in nb if i in neigh[j]) for i, nb in enumerate(neigh)]


def pseudo_labels(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Argmax of the two-view average prediction (first index wins ties)."""
    if p_a.shape != p_b.shape:
        raise ShapeMismatch("probability matrices must have equal shape")
    return np.argmax((p_a + p_b) / 2.0, axis=1)


def contextual_pairs(reciprocal, pseudo) -> np.ndarray:
    pseudo = np.asarray(pseudo)
    n = len(reciprocal)
    if pseudo.shape != (n,):
        raise ShapeMismatch("one pseudo-label per sample required")
    s = np.zeros((n, n), dtype=bool)
    for i, rec in enumerate(reciprocal):
        for j in rec:
            if j != i and pseudo[i] == pseudo[j]:
                s[i, j] = True
    return s


@dataclass
class NeighborContext:
    knn: np.ndarray
    reciprocal: list[frozenset]
    pair_labels: np.ndarray
    pseudo_labels: np.ndarray


def mine_context(z: np.ndarray, p_a: np.ndarray, p_b: np.ndarray, k_nn: int) -> NeighborContext:
    nn = knn(z, k_nn)
    rec = k_reciprocal(nn)
    pl = pseudo_labels(p_a, p_b)
    return NeighborContext(nn, rec, contextual_pairs(rec, pl), pl)


@dataclass
class PrototypeSet:
    """Per-class normalized member sums.

    Rows of ``vectors`` for absent classes are NaN and must be read through
    ``present``. ``sums`` and ``labels`` are kept for backpropagation.
    """

    vectors: np.ndarray
    present: np.ndarray
    sums: np.ndarray
    norms: np.ndarray
    labels: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[0]


def prototypes(z: np.ndarray, labels, n_classes: int) -> PrototypeSet:
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if labels.shape != (z.shape[0],):
        raise ShapeMismatch("one label per row required")
    sums = np.zeros((n_classes, z.shape[1]))
    counts = np.bincount(labels, minlength=n_classes)
    for k in np.flatnonzero(counts):
        members = z[labels == k]
        # canonical (lexicographic) member order makes the sum independent of row order
        sums[k] = np.sum(members[np.lexsort(members.T[::-1])], axis=0)
    norms = np.linalg.norm(sums, axis=1)
    present = counts > 0
    degenerate = present & (norms <= DEGENERATE_NORM)
    if degenerate.any():
        warnings.warn(
            f"member embeddings of classes {np.flatnonzero(degenerate).tolist()} sum to ~0; masked",
            DegenerateSum,
            stacklevel=2,
        )
        present &= ~degenerate
    vectors = np.full_like(sums, np.nan)
    vectors[present] = sums[present] / norms[present, None]
    return PrototypeSet(vectors, present, sums, norms, labels)
