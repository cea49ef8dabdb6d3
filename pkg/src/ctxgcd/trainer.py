"""Training loop: baseline warmup, then the full contextual objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .batching import BatchConfig, build_batch, index_depth
from .dataset import AugmentConfig, GcdDataset, ViewPair, augment_pair
from .errors import DivergenceDetected
from .evaluation import GcdMetrics, gcd_accuracy
from .losses import LossBreakdown, LossConfig, LossInputs, loss_total
from .mining import contextual_pairs, k_reciprocal, knn, pseudo_labels
from .model import (
    ModelParams,
    backward_rows,
    cosine_scores,
    cosine_scores_backward,
    embed,
    forward,
    init_params,
    predict,
    save_checkpoint,
)
from .numeric import Rng, softmax_temp

log = logging.getLogger(__name__)

MINING_VIEWS = ("a", "clean")


@dataclass(frozen=True)
class ModelConfig:
    encoder_dims: tuple[int, ...] = (32, 32)
    proj_dims: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        object.__setattr__(self, "proj_dims", tuple(int(d) for d in self.proj_dims))
        if not self.encoder_dims or not self.proj_dims or min(self.encoder_dims + self.proj_dims) < 1:
            raise ValueError("layer widths must be positive and non-empty")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 50
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_warm_epochs: int = 30
    k_nn: int = 10
    mining_view: str = "a"
    steps_per_epoch: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs <= epochs")
        if not 0 <= self.tau_t_warm_epochs <= self.epochs:
            raise ValueError("tau_t_warm_epochs must not exceed epochs")
        if not self.lr0 > 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr0 > 0 and momentum in [0, 1)")
        if self.k_nn < 1:
            raise ValueError("k_nn must be >= 1")
        if self.mining_view not in MINING_VIEWS:
            raise ValueError(f"mining_view must be one of {MINING_VIEWS}")


def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def teacher_temp(epoch: int, start: float = 0.07, end: float = 0.04, warm_epochs: int = 30) -> float:
    """Cosine ramp from ``start`` to ``end`` over ``warm_epochs``, then flat."""
    if epoch >= warm_epochs:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * epoch / warm_epochs))


# ---------------------------------------------------------------------------
# One mini-batch
# ---------------------------------------------------------------------------


@dataclass
class Targets:
    """Non-differentiated quantities of a step. ``teacher_*`` may be None (computed live)."""

    pseudo: np.ndarray
    pairs: np.ndarray
    teacher_a: np.ndarray | None = None
    teacher_b: np.ndarray | None = None


def compute_targets(
    params: ModelParams,
    views: ViewPair,
    loss_cfg: LossConfig,
    tau_t: float,
    k_nn: int,
    clean_rows: np.ndarray | None = None,
) -> Targets:
    """Teacher probabilities, pseudo-labels and contextual pairs for the current parameters.

    Pairs are mined on view A's projected embedding, or on the clean rows'
    embedding when ``clean_rows`` is given.
    """
    h_a, h_b, z_a, _, _ = forward(params, views)
    sc_a, _ = cosine_scores(params, h_a)
    sc_b, _ = cosine_scores(params, h_b)
    pseudo = pseudo_labels(softmax_temp(sc_a, loss_cfg.tau_s), softmax_temp(sc_b, loss_cfg.tau_s))
    z_mine = z_a if clean_rows is None else embed(params, clean_rows)[1]
    n = z_mine.shape[0]
    if n >= 2:
        pairs = contextual_pairs(k_reciprocal(knn(z_mine, min(k_nn, n - 1))), pseudo)
    else:
        pairs = np.zeros((n, n), dtype=bool)
    return Targets(pseudo, pairs, softmax_temp(sc_a, tau_t), softmax_temp(sc_b, tau_t))


def batch_objective(
    params: ModelParams,
    views: ViewPair,
    labels: np.ndarray,
    labeled_mask: np.ndarray,
    targets: Targets,
    loss_cfg: LossConfig,
    tau_t: float,
    context: bool = True,
) -> tuple[LossBreakdown, ModelParams]:
    """Loss breakdown and full parameter gradient for one batch with fixed targets."""
    n = len(views)
    h_a, h_b, z_a, z_b, cache = forward(params, views)
    h = np.vstack([h_a, h_b])
    scores, aux = cosine_scores(params, h)
    if targets.teacher_a is None or not loss_cfg.detach_teacher:
        teacher = softmax_temp(scores, tau_t)
    else:
        teacher = np.vstack([targets.teacher_a, targets.teacher_b])
    logits = scores / loss_cfg.tau_s
    inp = LossInputs(
        z_a, z_b, logits[:n], logits[n:], teacher[:n], teacher[n:],
        np.asarray(labels), np.asarray(labeled_mask, dtype=bool), targets.pairs, targets.pseudo,
    )
    breakdown, g = loss_total(inp, loss_cfg, context=context)

    dscores = np.vstack([g.logits_a, g.logits_b]) / loss_cfg.tau_s
    if not loss_cfg.detach_teacher:
        dt = np.vstack([g.teacher_a, g.teacher_b])
        dscores += teacher * (dt - np.sum(teacher * dt, axis=1, keepdims=True)) / tau_t
    dh, dprotos = cosine_scores_backward(aux, dscores)
    grads = backward_rows(params, cache, dh, np.vstack([g.z_a, g.z_b]), dprotos)
    return breakdown, grads


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    losses: dict
    lr: float
    tau_t: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def batch_labels(dataset: GcdDataset, idx: np.ndarray):
    mask = dataset.labeled_mask[idx]
    return np.where(mask, dataset.labels[idx], -1), mask


def train(dataset: GcdDataset, cfg: TrainConfig, log_path=None, checkpoint_dir=None):
    """Train from a seeded initialisation; returns ``(params, records)``.

    Each epoch re-embeds the clean dataset to rebuild the neighbour index
    used for batch construction. Epochs before ``warmup_epochs`` apply only
    the baseline objective.
    """
    rng = Rng(cfg.seed)
    scale = float(np.sqrt(np.mean(dataset.points**2))) or 1.0
    params = init_params(
        dataset.dim, dataset.n_classes, cfg.model.encoder_dims, cfg.model.proj_dims, rng.split(0), scale
    )
    batch_rng, aug_rng = rng.split(1), rng.split(2)
    bcfg = cfg.batch
    steps = cfg.steps_per_epoch or max(1, dataset.n // bcfg.size)
    depth = index_depth(bcfg, dataset.n)
    velocity = np.zeros(params.size)
    theta = params.to_vector()
    records: list[TrainLogRecord] = []
    log_fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
            tau_t = teacher_temp(epoch, cfg.tau_t_start, cfg.tau_t_end, cfg.tau_t_warm_epochs)
            context = epoch >= cfg.warmup_epochs
            _, z_all = embed(params, dataset.points)
            index = knn(z_all, depth)
            for step in range(steps):
                plan = build_batch(index, bcfg.q, bcfg.k_batch, bcfg.m, batch_rng)
                idx = plan.indices
                views = augment_pair(dataset.points[idx], cfg.augment, aug_rng, idx)
                labels, mask = batch_labels(dataset, idx)
                clean = dataset.points[idx] if cfg.mining_view == "clean" else None
                targets = compute_targets(params, views, cfg.loss, tau_t, cfg.k_nn, clean)
                breakdown, grads = batch_objective(params, views, labels, mask, targets, cfg.loss, tau_t, context)
                if not math.isfinite(breakdown.total):
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch} step {step}: {breakdown}")
                g = grads.to_vector()
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * theta
                velocity = cfg.momentum * velocity + g
                theta = theta - lr * velocity
                params = params.from_vector(theta)
                rec = TrainLogRecord(epoch, step, breakdown.to_dict(), lr, tau_t, time.perf_counter() - t0)
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
            if not np.all(np.isfinite(theta)):
                raise DivergenceDetected(f"non-finite parameters after epoch {epoch}")
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, Path(checkpoint_dir) / f"checkpoint_epoch{epoch + 1:04d}.json")
            log.debug("epoch %d lr=%.4g tau_t=%.4g total=%.4f", epoch, lr, tau_t, records[-1].losses["total"])
    finally:
        if log_fh:
            log_fh.close()
    return params, records


def evaluate(params: ModelParams, dataset: GcdDataset, tau_s: float = 0.1) -> GcdMetrics:
    """Accuracy of classifier predictions on the unlabeled rows."""
    rows = dataset.unlabeled_mask
    pred = predict(params, dataset.points[rows], tau_s)
    return gcd_accuracy(pred, dataset.labels[rows], dataset.old_classes)
