import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csattn.clustering import CentroidSet, ClusterConfig
from csattn.core import KvStore, ParameterError, SubspaceLayout, dense_topk, l2_normalize
from csattn.counters import CostCounters
from csattn.harness import DEFAULT_CELL, run_cell
from csattn.index import CsIndex, TopList, build_index, score_keys
from csattn.retrieval import (
    CandidateSet,
    Gathered,
    RetrievalConfig,
    SearchState,
    decode_search,
    gather_lists,
    reduce_by_key,
    select_centroids,
    select_topk,
    streaming_insert,
)
from csattn.sim import synthetic_workload


def make_index(rng, P=128, d=16, m=4, C=8, alpha=0.25, **kw):
    kv = KvStore(rng.standard_normal((P, d)), rng.standard_normal((P, d)))
    idx = build_index(rng.standard_normal((P, d)), kv, SubspaceLayout.uniform(d, m), ClusterConfig(n_centroids=C, iterations=3), alpha, **kw)
    return idx, kv


def cands(d):
    keys = sorted(d)
    return CandidateSet(np.array(keys, dtype=np.int64), np.array([d[k] for k in keys], dtype=float), np.ones(len(keys), dtype=np.int64))


# ------------------------------------------------------------------ config


def test_config_defaults_and_schedules():
    cfg = RetrievalConfig()
    assert (cfg.keep_ratio, cfg.recent_window, cfg.backoff_tau, cfg.search_period) == (0.05, 32, 1, 1)
    assert cfg.weight_vector(3).tolist() == [1, 1, 1]
    for name, want in {"0.05-step-1": (0.05, 1), "0.15-step-4": (0.15, 4), "0.20-step-8": (0.2, 8), "0.3-step-2": (0.3, 2)}.items():
        c = RetrievalConfig.from_schedule(name)
        assert (c.keep_ratio, c.search_period) == want
    assert RetrievalConfig.from_schedule("0.20-step-8").keep_count(1000) == 200
    with pytest.raises(ParameterError):
        RetrievalConfig.from_schedule("fast")
    with pytest.raises(ParameterError):
        RetrievalConfig(keep_ratio=0)
    with pytest.raises(ParameterError):
        RetrievalConfig(weights=[1, 1, 1]).weight_vector(2)


# ------------------------------------------------------------------ centroid selection


def test_select_centroid_equal_to_query(rng):
    idx, _ = make_index(rng)
    q = np.concatenate([idx.centroid_matrix(b)[3] * (b + 1.5) for b in range(idx.m)])
    sel, best = select_centroids(q, idx)
    assert [s.tolist() for s in sel] == [[3]] * idx.m
    np.testing.assert_allclose(best, 1.0, atol=1e-6)


def test_select_forced_backoff(rng):
    idx, _ = make_index(rng, C=3)
    sel, _ = select_centroids(rng.standard_normal(16), idx, tau=2, threshold=1.1)
    assert all(len(s) == 2 for s in sel)
    assert len(gather_lists(idx, sel)) == 2 * idx.m


def test_select_top1_matches_exhaustive(rng):
    idx, _ = make_index(rng, d=32, m=4, C=64)
    for _ in range(50):
        q = rng.standard_normal(32)
        sel, _ = select_centroids(q, idx)
        for b in range(idx.m):
            u, _ = l2_normalize(q[idx.layout.slice(b)])
            cos = [float(np.dot(c.astype(float), u.astype(float))) for c in idx.centroid_matrix(b)]
            assert sel[b][0] == max(range(64), key=lambda j: (cos[j], -j))


def test_gather_counts(rng):
    idx, _ = make_index(rng)
    sel, _ = select_centroids(rng.standard_normal(16), idx)
    g = gather_lists(idx, sel)
    assert len(g) == idx.m and all(x.table is idx.table(x.subspace, sel[x.subspace][0]) for x in g)
    keys = rng.standard_normal((10, 2))
    one = build_index(keys, KvStore(keys, keys), SubspaceLayout.uniform(2, 1), ClusterConfig(n_centroids=1), 1.0)
    g = gather_lists(one, select_centroids([1, 0], one)[0])
    assert len(g) == 1 and len(g[0].table) == 10


# ------------------------------------------------------------------ reduce


L1 = TopList(2, [3, 7], [0.9, 0.4])
L2 = TopList(2, [7, 1], [0.5, 0.2])


def test_reduce_examples():
    got = reduce_by_key([L1, L2], [1, 1]).entries
    assert got.keys() == {3, 7, 1}
    assert got == pytest.approx({3: 0.9, 7: 0.9, 1: 0.2})
    got = reduce_by_key([L1, L2], [2, 1]).entries
    assert got == pytest.approx({3: 1.8, 7: 1.3, 1: 0.2})
    dis = reduce_by_key([TopList(1, [4], [0.25]), TopList(1, [5], [0.5])], [1, 1])
    assert dis.entries == {4: 0.25, 5: 0.5}
    assert dis.source_counts.tolist() == [1, 1]
    assert reduce_by_key([L1, L2], [1, 1]).source_counts.tolist() == [1, 1, 2]
    assert len(reduce_by_key([], [1])) == 0


def test_reduce_backoff_lists_share_subspace_weight():
    got = reduce_by_key([Gathered(0, L1), Gathered(0, L2)], [3, 100]).entries
    assert got == pytest.approx({3: 2.7, 7: 2.7, 1: 0.6})


@given(st.lists(st.dictionaries(st.integers(0, 30), st.floats(-5, 5, width=32), max_size=10), min_size=1, max_size=6))
def test_reduce_dict_oracle(lists):
    tops = []
    for d in lists:
        items = sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))
        tops.append(TopList(max(1, len(items)), [k for k, _ in items], [v for _, v in items]))
    w = np.linspace(0.5, 2.0, len(tops))
    want = {}
    for b, d in enumerate(lists):
        for k, v in d.items():
            want[k] = want.get(k, 0.0) + w[b] * float(np.float32(v))
    got = reduce_by_key(tops, w)
    assert got.entries.keys() == want.keys()
    for k in want:
        assert got.entries[k] == pytest.approx(want[k], abs=1e-9)
    assert len(got) <= sum(len(t) for t in tops)


# ------------------------------------------------------------------ top-K


def test_select_topk_passthrough_example():
    cfg = RetrievalConfig(keep_ratio=0.5, recent_window=3)
    assert select_topk(cands({0: 9, 1: 8, 7: 0.1}), 10, cfg).tolist() == [0, 1, 7, 8, 9]


def test_select_topk_window_truncated_when_k_small():
    cfg = RetrievalConfig(keep_ratio=0.2, recent_window=5)
    assert select_topk(cands({0: 9}), 10, cfg).tolist() == [8, 9]


def test_select_topk_keep_all():
    for passthrough in (True, False):
        cfg = RetrievalConfig(keep_ratio=1.0, recent_window=2, recent_passthrough=passthrough)
        assert select_topk(cands({3: 1.0}), 10, cfg).tolist() == list(range(10))


def test_select_topk_sort_oracle(rng):
    s = rng.standard_normal(200)
    cfg = RetrievalConfig(keep_ratio=0.05, recent_window=0)
    got = select_topk(CandidateSet(np.arange(200), s, np.ones(200, int)), 200, cfg)
    assert got.tolist() == sorted(sorted(range(200), key=lambda i: (-s[i], i))[:10])


def test_select_topk_no_passthrough_window_competes():
    cfg = RetrievalConfig(keep_ratio=0.3, recent_window=3, recent_passthrough=False)
    # window 7,8,9 absent from candidates score 0, so negatives lose to them
    got = select_topk(cands({0: 5.0, 1: -1.0, 8: 2.0}), 10, cfg)
    assert got.tolist() == [0, 7, 8]


def test_select_topk_fallback_on_empty():
    cfg = RetrievalConfig(keep_ratio=0.3, recent_window=0)
    assert select_topk(CandidateSet.empty(), 10, cfg).tolist() == [7, 8, 9]
    assert select_topk(cands({2: 1.0}), 10, cfg).tolist() == [2, 8, 9]
    with pytest.raises(ParameterError):
        select_topk(CandidateSet.empty(), 0, cfg)


@given(st.integers(1, 300), st.floats(0.01, 1.0), st.integers(0, 40), st.booleans(), st.integers(0, 2**31))
def test_select_topk_size_and_window(n, rho, R, passthrough, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, n + 1))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    cfg = RetrievalConfig(keep_ratio=rho, recent_window=R, recent_passthrough=passthrough)
    got = select_topk(CandidateSet(idx, rng.standard_normal(k), np.ones(k, int)), n, cfg)
    K = max(1, math.ceil(round(rho * n, 9)))
    assert got.shape[0] == cfg.keep_count(n) and abs(got.shape[0] - K) <= 1
    assert np.unique(got).size == got.size and np.all(np.diff(got) > 0)
    if passthrough:
        assert set(range(n - min(R, got.size), n)) <= set(got.tolist())


# ------------------------------------------------------------------ decode_search


@pytest.mark.parametrize("P,searching", [(1, list(range(10))), (4, [0, 4, 8])])
def test_decode_search_schedule(rng, P, searching):
    idx, kv = make_index(rng)
    cfg = RetrievalConfig(keep_ratio=0.3, search_period=P, recent_window=4)
    state = SearchState()
    got = []
    for t in range(10):
        c = CostCounters()
        sel = decode_search(rng.standard_normal(16), idx, kv, cfg, state, c)
        assert sel.shape[0] == cfg.keep_count(kv.total_len)
        assert set(range(kv.total_len - 4, kv.total_len)) <= set(sel.tolist())
        if c.searches:
            got.append(t)
            assert c.centroid_dot_ops == idx.C * idx.d
            assert c.gathered_entries <= idx.m * idx.capacity
            assert c.candidates <= idx.m * 1 * idx.capacity
        kv.append(rng.standard_normal(16), rng.standard_normal(16))
    assert got == searching


def test_reuse_step_keeps_cached_scores_and_tracks_window(rng):
    idx, kv = make_index(rng)
    cfg = RetrievalConfig(keep_ratio=0.25, search_period=8, recent_window=5)
    state = SearchState()
    decode_search(rng.standard_normal(16), idx, kv, cfg, state)
    cached = state.cached
    for _ in range(7):
        kv.append(rng.standard_normal(16), rng.standard_normal(16))
        sel = decode_search(rng.standard_normal(16), idx, kv, cfg, state)
        n = kv.total_len
        assert state.cached is cached
        assert sel.shape[0] == math.ceil(0.25 * n)
        assert set(range(n - 5, n)) <= set(sel.tolist())


def test_weight_scaling_invariance(rng):
    idx, kv = make_index(rng, alpha=0.5)
    w = rng.uniform(0.5, 2.0, idx.m)
    for c in (0.37, 3.0, 1e3):
        for _ in range(10):
            q = rng.standard_normal(16)
            a = decode_search(q, idx, kv, RetrievalConfig(keep_ratio=0.2, recent_window=0, weights=w), SearchState())
            b = decode_search(q, idx, kv, RetrievalConfig(keep_ratio=0.2, recent_window=0, weights=c * w), SearchState())
            assert np.array_equal(a, b)


def test_bump_hook_disabled_by_default_and_applied(rng):
    idx, kv = make_index(rng)
    assert RetrievalConfig().bump_hook is None
    cfg = RetrievalConfig(keep_ratio=0.1, recent_window=2, bump_hook=lambda q, best, R, K: (R, K + 3))
    sel = decode_search(rng.standard_normal(16), idx, kv, cfg, SearchState())
    assert sel.shape[0] == cfg.keep_count(kv.total_len) + 3


# ------------------------------------------------------------------ exactness


@pytest.mark.parametrize("m", [1, 4])
def test_degenerate_exactness(rng, m):
    P, d = 96, 16
    keys = rng.standard_normal((P, d)).astype(np.float32)
    kv = KvStore(keys, keys)
    layout = SubspaceLayout.uniform(d, m)
    cfg = RetrievalConfig(keep_ratio=0.1, recent_window=0, recent_passthrough=False)
    for _ in range(20):
        q = rng.standard_normal(d).astype(np.float32)
        sets = [CentroidSet(b, l2_normalize(q[layout.slice(b)])[0][None, :]) for b in range(m)]
        idx = build_index(None, kv, layout, ClusterConfig(n_centroids=1), 1.0, centroid_sets=sets)
        sel = decode_search(q, idx, kv, cfg, SearchState())
        K = cfg.keep_count(P)
        if m == 1:
            assert sel.tolist() == dense_topk(q, kv, K).tolist()
        s = sum(score_keys(sets[b].centroids, keys[:, layout.slice(b)])[0].astype(float) for b in range(m))
        assert sel.tolist() == sorted(sorted(range(P), key=lambda i: (-s[i], i))[:K])


# ------------------------------------------------------------------ streaming insert


def one_list_index(toplist):
    cs = CentroidSet(0, [[1.0, 0.0]])
    return CsIndex(SubspaceLayout((2,)), [cs], [[toplist]], 1.0, 2, toplist.capacity)


def test_streaming_insert_examples():
    idx = one_list_index(TopList(2, [0, 1], [2.0, 0.0]))
    rep = streaming_insert([1.0, 5.0], 3, idx)
    assert rep.n_applied == 1 and rep.attempted == 1
    assert idx.table(0, 0).indices.tolist() == [0, 3]
    assert idx.table(0, 0).scores.tolist() == [2.0, 1.0]
    rep = streaming_insert([-0.5, 0.0], 4, idx)
    assert rep.n_applied == 0 and idx.table(0, 0).indices.tolist() == [0, 3]
    empty = one_list_index(TopList(2))
    assert streaming_insert([-100.0, 0.0], 0, empty).n_applied == 1


@pytest.mark.parametrize("seed", range(6))
def test_incremental_equals_batch(seed):
    rng = np.random.default_rng(seed)
    P = int(rng.integers(4, 129))
    N = int(rng.integers(P, 257))
    d = 8
    keys = rng.standard_normal((N, d)).astype(np.float32)
    keys[rng.integers(N, size=5)] = keys[0]  # duplicate scores exercise the tie rule
    layout = SubspaceLayout.uniform(d, 2)
    kv = KvStore(keys[:P], keys[:P])
    idx = build_index(rng.standard_normal((P, d)), kv, layout, ClusterConfig(n_centroids=4, iterations=2), 0.3)
    for i in range(P, N):
        streaming_insert(keys[i], i, idx)
    batch = build_index(None, KvStore(keys, keys), layout, ClusterConfig(n_centroids=4), list_size=idx.capacity, centroid_sets=idx.centroid_sets)
    for b in range(idx.m):
        for j in range(idx.C):
            assert idx.table(b, j) == batch.table(b, j)
    idx.validate()


# ------------------------------------------------------------------ recall monotonicity


@pytest.fixture(scope="module")
def many_cluster_workload():
    return synthetic_workload(2048, 32, 256, decode_len=32, seed=1)


def _recall(w, **cell):
    return run_cell({**DEFAULT_CELL, "m": 4, "centroids": 32, "rho": 0.1, **cell}, w, 0)[0].mean()


def test_recall_non_decreasing_in_list_size(many_cluster_workload):
    r = [_recall(many_cluster_workload, alpha=a) for a in (0.05, 0.1, 0.2, 0.4)]
    assert all(b >= a for a, b in zip(r, r[1:])), r


def test_recall_non_decreasing_in_tau(many_cluster_workload):
    r = [_recall(many_cluster_workload, alpha=0.1, tau=t, backoff_threshold=1.1) for t in (1, 2, 3)]
    assert all(b >= a for a, b in zip(r, r[1:])), r
