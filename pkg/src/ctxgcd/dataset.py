"""Synthetic GCD problems, embedding-file I/O and two-view augmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleSeparation, InvariantViolation, IoError, ParseError
from .numeric import Rng

log = logging.getLogger(__name__)

FORMATS = ("csv", "jsonl", "bin")
BIN_MAGIC = b"GCDE"
BIN_VERSION = 1


@dataclass
class GcdDataset:
    """Vectors with partial labels.

    ``labels`` holds the ground-truth class of every row, or -1 where the
    truth is unknown. Only rows with ``labeled_mask`` set may be used as
    supervision during training; the rest form the unlabeled set.
    """

    points: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    old_classes: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        self.old_classes = tuple(sorted(int(c) for c in self.old_classes))
        self.n_classes = int(self.n_classes)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def unlabeled_mask(self) -> np.ndarray:
        return ~self.labeled_mask

    def validate(self) -> "GcdDataset":
        n = self.n
        if self.points.ndim != 2 or n == 0 or self.dim == 0:
            raise InvariantViolation("points must be a non-empty N x D matrix")
        if self.labels.shape != (n,) or self.labeled_mask.shape != (n,):
            raise InvariantViolation("labels and labeled_mask must have one entry per row")
        if not np.all(np.isfinite(self.points)):
            raise InvariantViolation("points contain NaN or Inf")
        if not 1 <= len(self.old_classes) <= self.n_classes:
            raise InvariantViolation("need 1 <= |old classes| <= K_u")
        if any(c < 0 or c >= self.n_classes for c in self.old_classes):
            raise InvariantViolation("old class id outside [0, K_u)")
        known = self.labels[self.labels >= 0]
        if np.any(self.labels < -1) or np.any(known >= self.n_classes):
            raise InvariantViolation("label outside [0, K_u) and not -1")
        lab = self.labels[self.labeled_mask]
        bad = ~np.isin(lab, np.asarray(self.old_classes))
        if np.any(bad):
            rows = np.flatnonzero(self.labeled_mask)[bad]
            raise InvariantViolation(
                f"labeled row {int(rows[0])} has class {int(lab[bad][0])}, which is not an old class"
            )
        if self.labeled_mask.all():
            raise InvariantViolation("at least one unlabeled point is required")
        return self


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.5
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must lie in [0, 1)")


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise ValueError("views must have equal shape")

    def __len__(self):
        return self.view_a.shape[0]


def _place_means(k: int, dim: int, class_sep: float, rng: Rng, max_tries: int = 1000) -> np.ndarray:
    # Sphere radius large enough that k equally spaced means on a circle would be 1.5x apart.
    radius = class_sep * max(1.0, 0.75 / math.sin(math.pi / max(k, 2)))
    means: list[np.ndarray] = []
    for _ in range(k):
        for _ in range(max_tries):
            v = rng.normal(size=dim)
            nv = np.linalg.norm(v)
            if nv == 0:
                continue
            cand = radius * v / nv
            if all(np.linalg.norm(cand - m) >= class_sep for m in means):
                means.append(cand)
                break
        else:
            raise InfeasibleSeparation(
                f"could not place {k} means in R^{dim} with pairwise distance >= {class_sep}"
            )
    return np.stack(means)


def gen_gaussian_gcd(
    n_classes: int = 6,
    n_old: int = 3,
    dim: int = 16,
    n_per_class: int = 100,
    class_sep: float = 8.0,
    sigma: float = 1.0,
    labeled_ratio: float = 0.5,
    rng: Rng | None = None,
    return_means: bool = False,
):
    """Draw an isotropic Gaussian mixture and apply the old/new labeled split.

    Classes ``0 .. n_old-1`` are the old classes. Within each old class,
    ``round(labeled_ratio * n_per_class)`` points are labeled, chosen
    uniformly. Rows are shuffled.
    """
    if not 1 <= n_old <= n_classes:
        raise ValueError(f"need 1 <= n_old <= n_classes, got n_old={n_old}, n_classes={n_classes}")
    if dim < 1 or n_per_class < 1:
        raise ValueError("dim and n_per_class must be positive")
    if not 0 <= labeled_ratio <= 1:
        raise ValueError("labeled_ratio must lie in [0, 1]")
    rng = rng if rng is not None else Rng(0)
    means = _place_means(n_classes, dim, class_sep, rng.split(0))
    noise_rng = rng.split(1)
    label_rng = rng.split(2)

    labels = np.repeat(np.arange(n_classes), n_per_class)
    points = means[labels] + sigma * noise_rng.normal(size=(labels.size, dim))
    mask = np.zeros(labels.size, dtype=bool)
    n_lab = int(round(labeled_ratio * n_per_class))
    for c in range(n_old):
        rows = np.flatnonzero(labels == c)
        mask[label_rng.choice(rows, size=n_lab, replace=False)] = True

    order = rng.split(3).permutation(labels.size)
    ds = GcdDataset(points[order], labels[order], mask[order], tuple(range(n_old)), n_classes)
    # A fully labeled draw (n_old == n_classes, ratio 1) is a legal boundary case.
    if not ds.labeled_mask.all():
        ds.validate()
    return (ds, means) if return_means else ds


def augment_pair(rows: np.ndarray, cfg: AugmentConfig, rng: Rng, indices=None) -> ViewPair:
    """Two independent noisy views: additive Gaussian noise, then coordinate dropout."""
    rows = np.asarray(rows, dtype=np.float64)
    views = []
    for _ in range(2):
        v = rows.copy()
        if cfg.noise_sigma > 0:
            v += cfg.noise_sigma * rng.normal(size=rows.shape)
        if cfg.dropout_prob > 0:
            v *= rng.random(rows.shape) >= cfg.dropout_prob
        views.append(v)
    idx = np.arange(rows.shape[0]) if indices is None else np.asarray(indices, dtype=np.int64)
    return ViewPair(views[0], views[1], idx)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in FORMATS:
        return suffix
    raise IoError(f"cannot infer format from {path!s}; pass one of {FORMATS}")


def save_embeddings(ds: GcdDataset, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or infer_format(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "is_labeled"] + [f"f{j}" for j in range(ds.dim)])
            for y, m, row in zip(ds.labels, ds.labeled_mask, ds.points):
                w.writerow([int(y), int(m)] + [repr(float(x)) for x in row])
    elif fmt == "jsonl":
        with open(path, "w") as fh:
            for y, m, row in zip(ds.labels, ds.labeled_mask, ds.points):
                rec = {"label": int(y), "is_labeled": int(m), "features": [float(x) for x in row]}
                fh.write(json.dumps(rec) + "\n")
    elif fmt == "bin":
        rec = np.dtype([("label", "<i4"), ("is_labeled", "u1"), ("features", "<f4", (ds.dim,))])
        arr = np.empty(ds.n, dtype=rec)
        arr["label"] = ds.labels
        arr["is_labeled"] = ds.labeled_mask
        arr["features"] = ds.points
        with open(path, "wb") as fh:
            fh.write(BIN_MAGIC)
            fh.write(struct.pack("<HQQII", BIN_VERSION, ds.n, ds.dim, ds.n_classes, len(ds.old_classes)))
            fh.write(struct.pack(f"<{len(ds.old_classes)}I", *ds.old_classes))
            fh.write(arr.tobytes())
    else:
        raise IoError(f"unknown format {fmt!r}")
    return path


def _assemble(labels, mask, feats, n_classes, old_classes) -> GcdDataset:
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if old_classes is None:
        lab = labels[mask]
        if np.any(lab < 0):
            row = int(np.flatnonzero(mask & (labels < 0))[0])
            raise InvariantViolation(f"labeled row {row} has unknown label -1")
        old_classes = tuple(np.unique(lab).tolist())
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
        n_classes = max(n_classes, max(old_classes, default=-1) + 1)
    ds = GcdDataset(np.asarray(feats, dtype=np.float64), labels, mask, tuple(old_classes), n_classes)
    return ds.validate()


def _parse_flag(value: str, line: int) -> bool:
    if value not in ("0", "1"):
        raise ParseError(f"is_labeled must be 0 or 1, got {value!r}", line)
    return value == "1"


def _load_csv(path: Path):
    labels, mask, feats = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if header[:2] != ["label", "is_labeled"] or len(header) < 3:
            raise ParseError("header must be label,is_labeled,f0,f1,...", 1)
        dim = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ParseError(f"expected {dim + 2} fields, got {len(row)}", lineno)
            try:
                labels.append(int(row[0]))
                feats.append([float(x) for x in row[2:]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            mask.append(_parse_flag(row[1].strip(), lineno))
    if not labels:
        raise ParseError("no data rows", 2)
    return labels, mask, feats


def _load_jsonl(path: Path):
    labels, mask, feats = [], [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                lab = int(obj["label"])
                flag = _parse_flag(str(int(obj["is_labeled"])), lineno)
                f = [float(x) for x in obj["features"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed record: {exc}", lineno) from None
            if dim is None:
                dim = len(f)
            if len(f) != dim or dim == 0:
                raise ParseError(f"expected {dim} features, got {len(f)}", lineno)
            labels.append(lab)
            mask.append(flag)
            feats.append(f)
    if not labels:
        raise ParseError("no data rows", 1)
    return labels, mask, feats


def _load_bin(path: Path):
    raw = path.read_bytes()
    head = struct.calcsize("<HQQII")
    if raw[:4] != BIN_MAGIC:
        raise ParseError("bad magic bytes", 1)
    if len(raw) < 4 + head:
        raise ParseError("truncated header", 1)
    version, n, dim, n_classes, n_old = struct.unpack_from("<HQQII", raw, 4)
    if version != BIN_VERSION:
        raise ParseError(f"unsupported version {version}", 1)
    off = 4 + head
    old = struct.unpack_from(f"<{n_old}I", raw, off)
    off += 4 * n_old
    rec = np.dtype([("label", "<i4"), ("is_labeled", "u1"), ("features", "<f4", (dim,))])
    if len(raw) - off != n * rec.itemsize:
        raise ParseError(f"payload size {len(raw) - off} does not match {n} records of dim {dim}", 1)
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    if np.any(arr["is_labeled"] > 1):
        raise ParseError("is_labeled must be 0 or 1", 1)
    return arr["label"], arr["is_labeled"].astype(bool), arr["features"].astype(np.float64), n_classes, old


def load_embeddings(path, fmt: str | None = None, n_classes: int | None = None, old_classes=None) -> GcdDataset:
    """Read a dataset written in one of the supported formats.

    For csv and jsonl, the old-class set defaults to the classes of the
    labeled rows and ``K_u`` to the largest label + 1, unless given. The bin
    header carries both.
    """
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    fmt = fmt or infer_format(path)
    if fmt == "csv":
        labels, mask, feats = _load_csv(path)
    elif fmt == "jsonl":
        labels, mask, feats = _load_jsonl(path)
    elif fmt == "bin":
        labels, mask, feats, k, old = _load_bin(path)
        n_classes = k if n_classes is None else n_classes
        old_classes = old if old_classes is None else old_classes
    else:
        raise IoError(f"unknown format {fmt!r}")
    return _assemble(labels, mask, feats, n_classes, old_classes)
