"""Dense numeric helpers shared by every other module.

All routines operate in float64. Vector routines accept a 1-D array or a
2-D array, in which case they act row-wise along the last axis.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import NonFiniteEvaluation, NonPositiveTemperature, NotAProbabilityVector, ZeroVector

ZERO_NORM = 1e-30
LOG_CLAMP = 1e-300


def _as_float(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluation("input contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (or each row of ``v``) to unit Euclidean norm."""
    arr = _as_float(v)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVector("cannot normalize a zero vector")
    return arr / norms


def cosine_distance(u, v) -> float:
    u = _as_float(u)
    v = _as_float(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu <= ZERO_NORM or nv <= ZERO_NORM:
        raise ZeroVector("cosine distance undefined for a zero vector")
    cos = float(np.dot(u, v) / (nu * nv))
    return 1.0 - min(1.0, max(-1.0, cos))


def log_softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    x = _as_float(logits) / tau
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax via the max-shifted log-sum-exp."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    x = _as_float(logits) / tau
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy(p) -> float:
    """Shannon entropy in nats; zero entries contribute nothing."""
    p = _as_float(p)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise NotAProbabilityVector("entries must be nonnegative and sum to 1")
    return float(-np.sum(p * np.log(np.maximum(p, LOG_CLAMP))))


def check_gradient(
    f: Callable[[np.ndarray], float],
    grad_f: Callable[[np.ndarray], np.ndarray],
    x,
    h: float = 1e-5,
) -> float:
    """Max relative error between ``grad_f(x)`` and central differences of ``f``.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad_f(x.copy()), dtype=np.float64).reshape(x.shape)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteEvaluation("analytic gradient is not finite")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.copy())
        flat[i] = orig - h
        fm = f(x.copy())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteEvaluation(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Rng:
    """Seeded, splittable random stream backed by the counter-based Philox generator.

    ``split(child_id)`` derives an independent stream whose state depends
    only on the parent seed path and ``child_id``, never on how much of the
    parent stream has been consumed.
    """

    def __init__(self, seed: int = 0, _path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, child_id: int) -> "Rng":
        return Rng(self.seed, self.path + (int(child_id),))

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def random(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, x) -> np.ndarray:
        return self.gen.permutation(x)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
