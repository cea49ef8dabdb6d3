import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxgcd.batching import BatchConfig, build_batch, index_depth
from ctxgcd.errors import DatasetTooSmall
from ctxgcd.mining import knn
from ctxgcd.numeric import Rng

from helpers import brute_knn, unit_rows


def test_default_batch_size():
    assert BatchConfig().size == 128


def test_size_q_k_plus_m():
    index = knn(unit_rows(np.random.default_rng(0), 30, 3), 10)
    plan = build_batch(index, 2, 3, 4, Rng(0))
    assert len(plan) == 10
    assert len(plan.query_indices) == 2 and len(plan.filler_indices) == 4
    assert [len(g) for g in plan.neighbor_indices] == [2, 2]


def test_singleton_batch():
    index = knn(unit_rows(np.random.default_rng(1), 5, 3), 2)
    plan = build_batch(index, 1, 1, 0, Rng(3))
    assert plan.indices.tolist() == plan.query_indices.tolist() and len(plan) == 1


def test_too_small():
    index = knn(unit_rows(np.random.default_rng(2), 9, 3), 4)
    with pytest.raises(DatasetTooSmall):
        build_batch(index, 2, 3, 4, Rng(0))


def test_neighbor_groups_match_bruteforce_on_tight_clusters():
    # 8 tight clusters of 4 points on well separated directions
    g = np.random.default_rng(3)
    centers = unit_rows(g, 8, 6) * 10
    x = np.repeat(centers, 4, axis=0) + 0.01 * g.normal(size=(32, 6))
    z = x / np.linalg.norm(x, axis=1, keepdims=True)
    expected = brute_knn(z, 3)
    index = knn(z, 10)
    for seed in range(20):
        plan = build_batch(index, 1, 4, 5, Rng(seed))
        qi = int(plan.query_indices[0])
        assert plan.neighbor_indices[0].tolist() == expected[qi]
        assert set(expected[qi]) == {j for j in range(qi // 4 * 4, qi // 4 * 4 + 4)} - {qi}


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    q=st.integers(1, 6),
    k_batch=st.integers(1, 5),
    m=st.integers(0, 10),
)
def test_plan_properties(seed, q, k_batch, m):
    n = 60
    cfg = BatchConfig(q, k_batch, m)
    index = knn(unit_rows(np.random.default_rng(seed), n, 4), index_depth(cfg, n))
    plan = build_batch(index, q, k_batch, m, Rng(seed))
    idx = plan.indices
    assert idx.size == cfg.size == np.unique(idx).size
    assert idx.tolist() == [*plan.query_indices, *np.concatenate(plan.neighbor_indices), *plan.filler_indices]
    for qi, group in zip(plan.query_indices, plan.neighbor_indices):
        row = index[qi].tolist()
        positions = [row.index(j) for j in group]
        assert positions == sorted(positions)  # subset of the index list, in index order


def test_plans_deterministic():
    index = knn(unit_rows(np.random.default_rng(4), 50, 4), 20)
    a = build_batch(index, 3, 4, 6, Rng(11))
    b = build_batch(index, 3, 4, 6, Rng(11))
    assert a.indices.tolist() == b.indices.tolist()
    assert a.indices.tolist() != build_batch(index, 3, 4, 6, Rng(12)).indices.tolist()
