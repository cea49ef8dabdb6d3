"""Clustering accuracy under the best cluster-to-class assignment, split into All/Old/New."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyInput, LengthMismatch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("all", "old", "new", "n_old", "n_new")


def contingency(pred, truth, size: int | None = None) -> np.ndarray:
    """``C[c, k]`` = number of rows predicted ``c`` whose true class is ``k``."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    size = size or int(max(pred.max(), truth.max())) + 1
    c = np.zeros((size, size), dtype=np.int64)
    np.add.at(c, (pred, truth), 1)
    return c


def hungarian_match(counts) -> dict[int, int]:
    """Cluster-to-class mapping maximising the total matched count.

    ``counts`` is a (possibly rectangular) nonnegative contingency table with
    clusters on rows; it is zero-padded to square before solving. Padding
    rows keep their own ids ``n_rows..size-1``.
    """
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0:
        raise EmptyInput("empty contingency table")
    if c.ndim != 2:
        raise ValueError("contingency table must be 2-D")
    # Solve on lexicographically sorted rows so that tie-breaking among
    # optimal assignments does not depend on the cluster ids. Rows with equal
    # counts are interchangeable, so per-class correct counts become exact
    # invariants of any relabeling.
    order = np.lexsort(c.T[::-1])
    size = max(c.shape)
    sq = np.zeros((size, size))
    sq[: c.shape[0], : c.shape[1]] = c[order]
    rows, cols = linear_sum_assignment(sq, maximize=True)
    return {int(order[r]) if r < len(order) else int(r): int(k) for r, k in zip(rows, cols)}


def matched_total(counts, mapping: dict[int, int]) -> float:
    c = np.asarray(counts)
    return float(sum(c[r, k] for r, k in mapping.items() if r < c.shape[0] and k < c.shape[1]))


@dataclass
class GcdMetrics:
    acc_all: float
    acc_old: float
    acc_new: float
    n_old: int
    n_new: int
    permutation: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"all": self.acc_all, "old": self.acc_old, "new": self.acc_new, "n_old": self.n_old, "n_new": self.n_new}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(METRIC_FIELDS)
        w.writerow([repr(v) if isinstance(v, float) else v for v in self.to_dict().values()])
        return buf.getvalue()


def gcd_accuracy(pred, truth, old_classes) -> GcdMetrics:
    """Accuracy under one global optimal assignment, then reported per split.

    Rows whose truth is -1 are dropped with a warning. A split with no rows
    reports NaN accuracy.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} labels")
    known = truth >= 0
    if not known.all():
        log.warning("excluding %d rows without ground truth from evaluation", int((~known).sum()))
        pred, truth = pred[known], truth[known]
    if pred.size == 0:
        raise EmptyInput("no labeled rows to evaluate")

    # Only clusters that occur take part, so the table is identical (up to row
    # order) under any relabeling of the predictions.
    used, local = np.unique(pred, return_inverse=True)
    n_cls = int(truth.max()) + 1
    counts = np.zeros((used.size, n_cls), dtype=np.int64)
    np.add.at(counts, (local, truth), 1)
    matched = hungarian_match(counts)
    mapping = {int(used[r]): k for r, k in matched.items() if r < used.size}
    mapped = np.array([mapping[int(c)] for c in pred])
    correct = mapped == truth
    is_old = np.isin(truth, np.asarray(list(old_classes), dtype=np.int64))
    n_old, n_new = int(is_old.sum()), int((~is_old).sum())

    def mean(x):
        return float(x.mean()) if x.size else float("nan")

    return GcdMetrics(mean(correct), mean(correct[is_old]), mean(correct[~is_old]), n_old, n_new, mapping)
