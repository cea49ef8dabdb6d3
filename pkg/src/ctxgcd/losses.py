"""Loss terms with analytic gradients w.r.t. their tensor inputs.

Every function returns the scalar value together with gradients shaped
like its differentiable inputs. Composition into the full objective lives
in :func:`loss_total`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import (
    BatchTooSmall,
    NoCommonClasses,
    NoLabeledSamples,
    NotAProbabilityVector,
    ShapeMismatch,
    ZeroVector,
)
from .mining import PrototypeSet, prototypes
from .numeric import LOG_CLAMP, ZERO_NORM, log_softmax_temp, softmax_temp


@dataclass(frozen=True)
class LossConfig:
    tau_u: float = 0.07
    tau_sup: float = 0.1
    tau_s: float = 0.1
    tau_t: float = 0.07
    tau_proto: float = 0.1
    lam: float = 0.35
    epsilon: float = 1.0
    delta: float = 0.5
    lambda_n: float = 0.1
    lambda_c: float = 0.3
    hinge_clamp: bool = True
    detach_teacher: bool = True

    def __post_init__(self):
        for name in ("tau_u", "tau_sup", "tau_s", "tau_t", "tau_proto"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.epsilon < 0 or self.lambda_n < 0 or self.lambda_c < 0:
            raise ValueError("epsilon, lambda_n and lambda_c must be nonnegative")
        if not 0 < self.delta <= 2:
            raise ValueError("delta must lie in (0, 2]")


@dataclass
class LossBreakdown:
    rep_u: float = 0.0
    rep_s: float = 0.0
    cls_l: float = 0.0
    cls_u: float = 0.0
    entropy_term: float = 0.0
    l_n: float = 0.0
    l_c: float = 0.0
    baseline: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True)))[:, 0]


def _check_pair(a, b):
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"expected two equal-shape matrices, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Representation losses
# ---------------------------------------------------------------------------


def loss_rep_u(z_a: np.ndarray, z_b: np.ndarray, tau: float):
    """Self-supervised InfoNCE with the second view as anchor.

    For anchor ``z_b[i]`` the positive is ``z_a[i]`` and the candidates are
    all rows of ``z_a`` (positive included).
    """
    _check_pair(z_a, z_b)
    n = z_a.shape[0]
    if n < 1:
        raise ShapeMismatch("empty batch")
    s = z_b @ z_a.T / tau
    value = float(np.mean(_logsumexp_rows(s) - np.diag(s)))
    ds = softmax_temp(s, 1.0)
    ds[np.diag_indices(n)] -= 1.0
    ds /= n
    return value, (ds.T @ z_b / tau, ds @ z_a / tau)


def loss_rep_s(z_a: np.ndarray, z_b: np.ndarray, labels, tau: float):
    """Supervised contrastive loss over labeled rows only.

    Positives of anchor ``i`` are the other rows with the same label; the
    denominator runs over every row except ``i``. Anchors without a positive
    are dropped from the mean, and the loss is zero if none remain.
    """
    _check_pair(z_a, z_b)
    labels = np.asarray(labels)
    n = z_a.shape[0]
    if n == 0:
        raise NoLabeledSamples("supervised contrastive loss needs labeled samples")
    if labels.shape != (n,):
        raise ShapeMismatch("one label per labeled row required")
    offdiag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & offdiag
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        return 0.0, (np.zeros_like(z_a), np.zeros_like(z_b))

    s = z_a @ z_b.T / tau
    masked = np.where(offdiag, s, -np.inf)
    sv, mv, pv, nv = s[valid], masked[valid], pos[valid], n_pos[valid]
    lse = _logsumexp_rows(mv)
    per_anchor = lse - np.sum(np.where(pv, sv, 0.0), axis=1) / nv
    value = float(np.mean(per_anchor))

    ds = np.zeros_like(s)
    ds[valid] = np.exp(mv - lse[:, None]) - pv / nv[:, None]
    ds /= valid.sum()
    return value, (ds @ z_b / tau, ds.T @ z_a / tau)


# ---------------------------------------------------------------------------
# Classifier losses
# ---------------------------------------------------------------------------


def _check_probs(p, name):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise NotAProbabilityVector(f"{name} rows must be probability vectors")


def mean_entropy(logits_a: np.ndarray, logits_b: np.ndarray):
    """Entropy of the mean softmax prediction over both views and all rows.

    Returns ``(H, dH/dlogits_a, dH/dlogits_b)``.
    """
    p = softmax_temp(np.vstack([logits_a, logits_b]), 1.0)
    rows = p.shape[0]
    p_bar = p.mean(axis=0)
    log_bar = np.log(np.maximum(p_bar, LOG_CLAMP))
    h = float(-np.sum(p_bar * log_bar))
    dl = -p * (log_bar - p @ log_bar[:, None]) / rows
    n = logits_a.shape[0]
    return h, dl[:n], dl[n:]


@dataclass
class ClsLoss:
    cls_l: float
    cls_u: float
    entropy: float
    grad_l: tuple[np.ndarray, np.ndarray]
    grad_u: tuple[np.ndarray, np.ndarray]
    # gradient of cls_u w.r.t. the teacher probabilities (unused when the teacher is detached)
    grad_teacher: tuple[np.ndarray, np.ndarray]


def loss_cls(logits_a, logits_b, teacher_a, teacher_b, labels, labeled_mask, epsilon: float) -> ClsLoss:
    """Supervised and self-distillation classifier losses on student logits.

    ``teacher_a``/``teacher_b`` are target probability rows; the student of
    each view is matched to the teacher of the other view. The entropy of
    the mean student prediction is subtracted, weighted by ``epsilon``.
    """
    _check_pair(logits_a, logits_b)
    _check_pair(teacher_a, teacher_b)
    _check_probs(teacher_a, "teacher_a")
    _check_probs(teacher_b, "teacher_b")
    n, k = logits_a.shape
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    labels = np.asarray(labels)

    logp_a = log_softmax_temp(logits_a, 1.0)
    logp_b = log_softmax_temp(logits_b, 1.0)
    p_a, p_b = np.exp(logp_a), np.exp(logp_b)

    n_lab = int(labeled_mask.sum())
    gl_a, gl_b = np.zeros_like(logits_a), np.zeros_like(logits_b)
    cls_l = 0.0
    if n_lab:
        rows = np.flatnonzero(labeled_mask)
        y = labels[rows]
        if np.any(y < 0) or np.any(y >= k):
            raise ShapeMismatch("labeled rows need class ids in [0, K)")
        onehot = np.zeros((n_lab, k))
        onehot[np.arange(n_lab), y] = 1.0
        cls_l = float(-(logp_a[rows, y].sum() + logp_b[rows, y].sum()) / (2 * n_lab))
        gl_a[rows] = (p_a[rows] - onehot) / (2 * n_lab)
        gl_b[rows] = (p_b[rows] - onehot) / (2 * n_lab)

    ce = -(np.sum(teacher_b * logp_a) + np.sum(teacher_a * logp_b)) / (2 * n)
    tb_sum = teacher_b.sum(axis=1, keepdims=True)
    ta_sum = teacher_a.sum(axis=1, keepdims=True)
    gu_a = (p_a * tb_sum - teacher_b) / (2 * n)
    gu_b = (p_b * ta_sum - teacher_a) / (2 * n)
    h, dh_a, dh_b = mean_entropy(logits_a, logits_b)
    cls_u = float(ce - epsilon * h)
    gu_a -= epsilon * dh_a
    gu_b -= epsilon * dh_b
    grad_teacher = (-logp_b / (2 * n), -logp_a / (2 * n))
    return ClsLoss(cls_l, cls_u, h, (gl_a, gl_b), (gu_a, gu_b), grad_teacher)


# ---------------------------------------------------------------------------
# Contextual losses
# ---------------------------------------------------------------------------


def _unit_rows(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVector("zero embedding row")
    return z / norms, norms


def loss_context_instance(z: np.ndarray, s: np.ndarray, delta: float, hinge_clamp: bool = True):
    """Pull contextual pairs together, push the rest beyond cosine distance ``delta``.

    Averages over the ``|B|^2 - |B|`` ordered pairs. Returns ``(value, dz)``.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise BatchTooSmall("instance-level contextual loss needs at least two samples")
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (n, n):
        raise ShapeMismatch("pair matrix must be |B| x |B|")
    u, norms = _unit_rows(z)
    d = 1.0 - u @ u.T
    offdiag = ~np.eye(n, dtype=bool)
    margin = delta - d
    if hinge_clamp:
        active = margin > 0
        push = np.where(active, margin, 0.0)
    else:
        active = np.ones_like(margin, dtype=bool)
        push = margin
    terms = s * d + (1.0 - s) * push
    scale = 1.0 / (n * n - n)
    value = float(np.sum(terms[offdiag]) * scale)

    dd = (s - (1.0 - s) * active) * offdiag * scale
    dcos = -dd
    du = (dcos + dcos.T) @ u
    dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms
    return value, dz


def _prototype_backward(protos: PrototypeSet, dmu: np.ndarray) -> np.ndarray:
    """Push gradients on unit prototypes back to the member rows."""
    dsum = np.zeros_like(protos.sums)
    k = protos.present
    mu = protos.vectors[k]
    dsum[k] = (dmu[k] - mu * np.sum(mu * dmu[k], axis=1, keepdims=True)) / protos.norms[k, None]
    return dsum[protos.labels]


def loss_context_cluster(protos_a: PrototypeSet, protos_b: PrototypeSet, tau: float):
    """Cross-view prototype InfoNCE.

    Rows: classes present in both views. Candidates: classes present in view
    B. Returns ``(value, (dz_a, dz_b))`` with gradients on the member
    embeddings each prototype set was built from.
    """
    if protos_a.n_classes != protos_b.n_classes:
        raise ShapeMismatch("prototype sets cover different class counts")
    common = protos_a.present & protos_b.present
    if not common.any():
        raise NoCommonClasses("no class has a prototype in both views")
    rows = np.flatnonzero(common)
    cols = np.flatnonzero(protos_b.present)
    mu_a = protos_a.vectors[rows]
    mu_b = protos_b.vectors[cols]
    logits = mu_a @ mu_b.T / tau
    target = np.searchsorted(cols, rows)
    lse = _logsumexp_rows(logits)
    value = float(np.mean(lse - logits[np.arange(rows.size), target]))

    dl = np.exp(logits - lse[:, None])
    dl[np.arange(rows.size), target] -= 1.0
    dl /= rows.size
    dmu_a = np.zeros_like(protos_a.sums)
    dmu_b = np.zeros_like(protos_b.sums)
    dmu_a[rows] = dl @ mu_b / tau
    dmu_b[cols] = dl.T @ mu_a / tau
    return value, (_prototype_backward(protos_a, dmu_a), _prototype_backward(protos_b, dmu_b))


# ---------------------------------------------------------------------------
# Composite
# ---------------------------------------------------------------------------


@dataclass
class LossInputs:
    """Everything the composite objective reads for one mini-batch.

    ``logits_*`` are student logits (cosine scores over ``tau_s``). Teacher
    probabilities, pseudo-labels and the pair matrix are targets.
    """

    z_a: np.ndarray
    z_b: np.ndarray
    logits_a: np.ndarray
    logits_b: np.ndarray
    teacher_a: np.ndarray
    teacher_b: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    pairs: np.ndarray
    pseudo: np.ndarray


@dataclass
class LossGrads:
    z_a: np.ndarray
    z_b: np.ndarray
    logits_a: np.ndarray
    logits_b: np.ndarray
    teacher_a: np.ndarray
    teacher_b: np.ndarray


def loss_total(inp: LossInputs, cfg: LossConfig, context: bool = True):
    """Baseline objective plus weighted contextual terms.

    With ``context=False`` (warmup) the contextual terms are still evaluated
    and reported but receive zero weight. Returns ``(LossBreakdown, LossGrads)``.
    """
    lam = cfg.lam
    n, k = inp.logits_a.shape
    mask = np.asarray(inp.labeled_mask, dtype=bool)
    out = LossBreakdown()

    out.rep_u, (gu_a, gu_b) = loss_rep_u(inp.z_a, inp.z_b, cfg.tau_u)

    gs_a, gs_b = np.zeros_like(inp.z_a), np.zeros_like(inp.z_b)
    if mask.any():
        out.rep_s, (ga, gb) = loss_rep_s(inp.z_a[mask], inp.z_b[mask], inp.labels[mask], cfg.tau_sup)
        gs_a[mask], gs_b[mask] = ga, gb

    cls = loss_cls(inp.logits_a, inp.logits_b, inp.teacher_a, inp.teacher_b, inp.labels, mask, cfg.epsilon)
    out.cls_l, out.cls_u, out.entropy_term = cls.cls_l, cls.cls_u, cls.entropy

    gn = np.zeros_like(inp.z_a)
    if n >= 2:
        out.l_n, gn = loss_context_instance(inp.z_a, inp.pairs, cfg.delta, cfg.hinge_clamp)

    gc_a, gc_b = np.zeros_like(inp.z_a), np.zeros_like(inp.z_b)
    try:
        pa = prototypes(inp.z_a, inp.pseudo, k)
        pb = prototypes(inp.z_b, inp.pseudo, k)
        out.l_c, (gc_a, gc_b) = loss_context_cluster(pa, pb, cfg.tau_proto)
    except NoCommonClasses:
        out.l_c = 0.0

    w_n = cfg.lambda_n if context else 0.0
    w_c = cfg.lambda_c if context else 0.0
    out.baseline = (1 - lam) * (out.rep_u + out.cls_u) + lam * (out.rep_s + out.cls_l)
    out.total = out.baseline + w_n * out.l_n + w_c * out.l_c

    grads = LossGrads(
        z_a=(1 - lam) * gu_a + lam * gs_a + w_n * gn + w_c * gc_a,
        z_b=(1 - lam) * gu_b + lam * gs_b + w_c * gc_b,
        logits_a=(1 - lam) * cls.grad_u[0] + lam * cls.grad_l[0],
        logits_b=(1 - lam) * cls.grad_u[1] + lam * cls.grad_l[1],
        teacher_a=(1 - lam) * cls.grad_teacher[0],
        teacher_b=(1 - lam) * cls.grad_teacher[1],
    )
    return out, grads
