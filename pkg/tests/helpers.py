"""Random small instances and brute-force references shared by the test modules."""

import itertools
import math

import numpy as np

from ctxgcd.dataset import ViewPair
from ctxgcd.losses import LossConfig
from ctxgcd.model import init_params
from ctxgcd.numeric import Rng
from ctxgcd.trainer import batch_objective, compute_targets


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def small_problem(seed, n=None, dim=None, k=None, cfg=None):
    """Model, two views, partial labels and frozen targets for one random batch."""
    g = np.random.default_rng(seed)
    n = n or int(g.integers(6, 13))
    dim = dim or int(g.integers(3, 9))
    k = k or int(g.integers(2, 5))
    cfg = cfg or LossConfig()
    params = init_params(dim, k, encoder_dims=(6, 5), proj_dims=(5, 4), rng=Rng(seed))
    x = g.normal(size=(n, dim))
    views = ViewPair(x + 0.3 * g.normal(size=x.shape), x + 0.3 * g.normal(size=x.shape), np.arange(n))
    labels = g.integers(0, k, size=n)
    mask = g.random(n) < 0.5
    mask[:2] = True
    labels[1] = labels[0]
    labels = np.where(mask, labels, -1)
    targets = compute_targets(params, views, cfg, 0.05, k_nn=3)
    return params, views, labels, mask, targets, cfg


def objective_fns(params, views, labels, mask, targets, cfg, tau_t=0.05, context=True):
    def f(theta):
        b, _ = batch_objective(params.from_vector(theta), views, labels, mask, targets, cfg, tau_t, context)
        return b.total

    def grad(theta):
        _, g = batch_objective(params.from_vector(theta), views, labels, mask, targets, cfg, tau_t, context)
        return g.to_vector()

    return f, grad


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------


def brute_knn(x, k, metric="cosine"):
    n = len(x)
    out = []
    for i in range(n):
        cands = []
        for j in range(n):
            if j == i:
                continue
            if metric == "cosine":
                d = 1.0 - float(np.dot(x[i], x[j]))
            else:
                d = math.sqrt(float(np.sum((x[i] - x[j]) ** 2)))
            cands.append((d, j))
        cands.sort()
        out.append([j for _, j in cands[:k]])
    return out


def brute_reciprocal(nn):
    n = len(nn)
    return [{j for j in range(n) if j != i and j in nn[i] and i in nn[j]} for i in range(n)]


def brute_pairs(nn, pseudo):
    n = len(nn)
    s = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and j in nn[i] and i in nn[j] and pseudo[i] == pseudo[j]:
                s[i, j] = True
    return s


def brute_best_match(counts):
    c = np.asarray(counts)
    size = max(c.shape)
    sq = np.zeros((size, size))
    sq[: c.shape[0], : c.shape[1]] = c
    return max(sum(sq[r, perm[r]] for r in range(size)) for perm in itertools.permutations(range(size)))
