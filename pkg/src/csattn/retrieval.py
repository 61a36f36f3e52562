"""Online decode path: centroid routing, list gather, reduce-by-key, Top-K and streaming inserts."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import ACC_DTYPE, KvStore, ParameterError, as_head_vector, ceil_ratio, l2_normalize
from .counters import CostCounters
from .index import CsIndex, TopList, score_keys

SCHEDULES = {
    "0.05-step-1": (0.05, 1),
    "0.15-step-4": (0.15, 4),
    "0.20-step-8": (0.20, 8),
}


@dataclass
class RetrievalConfig:
    keep_ratio: float = 0.05
    search_period: int = 1
    recent_window: int = 32
    weights: Optional[Sequence[float]] = None  # None -> 1 for every subspace
    backoff_tau: int = 1
    backoff_threshold: float = float("-inf")
    recent_passthrough: bool = True
    # called as hook(q, best_cosines, window, K) -> (window, K); ships disabled
    bump_hook: Optional[Callable] = None

    def __post_init__(self):
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ParameterError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.search_period < 1:
            raise ParameterError("search_period must be >= 1")
        if self.recent_window < 0:
            raise ParameterError("recent_window must be >= 0")
        if self.backoff_tau < 1:
            raise ParameterError("backoff_tau must be >= 1")

    @classmethod
    def from_schedule(cls, name: str, **overrides) -> "RetrievalConfig":
        """Config for a named ``"<keep ratio>-step-<period>"`` schedule."""
        if name in SCHEDULES:
            rho, period = SCHEDULES[name]
        else:
            try:
                ratio, word, step = name.split("-")
                if word != "step":
                    raise ValueError
                rho, period = float(ratio), int(step)
            except ValueError:
                raise ParameterError(f"unknown schedule {name!r}; expected e.g. '0.05-step-1'") from None
        return cls(keep_ratio=rho, search_period=period, **overrides)

    def with_backoff(self, tau: int, threshold: float) -> "RetrievalConfig":
        return replace(self, backoff_tau=tau, backoff_threshold=threshold)

    def weight_vector(self, m: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(m)
        w = np.asarray(self.weights, dtype=ACC_DTYPE)
        if w.shape != (m,):
            raise ParameterError(f"{w.shape[0]} weights for {m} subspaces")
        return w

    def keep_count(self, n: int) -> int:
        return max(1, ceil_ratio(self.keep_ratio, n))


BACKOFF_PRESETS = {"tau2": 2, "tau3": 3}


@dataclass
class CandidateSet:
    """Accumulated scores keyed by position; arrays are sorted by index."""

    indices: np.ndarray
    scores: np.ndarray
    source_counts: np.ndarray

    @classmethod
    def empty(cls) -> "CandidateSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))

    @property
    def entries(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.scores.tolist()))

    def __len__(self) -> int:
        return self.indices.shape[0]


class Gathered(NamedTuple):
    subspace: int
    table: TopList


def select_centroids(q, index: CsIndex, tau: int = 1, threshold: float = float("-inf")):
    """Per subspace, the nearest centroid by cosine, or the top-``tau`` when the best cosine is below ``threshold``.

    Returns ``(selection, best_cosines)``.  A zero query subvector has all
    cosines 0 and so routes to centroid 0.
    """
    q = as_head_vector(q, index.d)
    selection = []
    best = np.empty(index.m)
    for b in range(index.m):
        unit, _ = l2_normalize(q[index.layout.slice(b)])
        cos = index.centroid_matrix(b).astype(ACC_DTYPE) @ unit.astype(ACC_DTYPE)
        order = np.lexsort((np.arange(cos.shape[0]), -cos))
        best[b] = cos[order[0]]
        take = tau if best[b] < threshold else 1
        selection.append(order[: min(take, cos.shape[0])])
    return selection, best


def gather_lists(index: CsIndex, selection: Sequence[Sequence[int]]) -> list[Gathered]:
    return [Gathered(b, index.tables[b][int(j)]) for b, js in enumerate(selection) for j in js]


def reduce_by_key(lists: Sequence, weights) -> CandidateSet:
    """Weighted sum of list scores grouped by key index (sort + segmented sum).

    ``lists`` holds :class:`Gathered` items, or bare :class:`TopList` objects
    taken to belong to subspaces ``0, 1, ...`` in order.
    """
    weights = np.asarray(weights, dtype=ACC_DTYPE)
    idx_parts, score_parts = [], []
    for pos, item in enumerate(lists):
        b, table = (item.subspace, item.table) if isinstance(item, Gathered) else (pos, item)
        idx_parts.append(table.indices)
        score_parts.append(weights[b] * table.scores.astype(ACC_DTYPE))
    if not idx_parts or sum(p.shape[0] for p in idx_parts) == 0:
        return CandidateSet.empty()
    idx = np.concatenate(idx_parts)
    vals = np.concatenate(score_parts)
    keys, inverse = np.unique(idx, return_inverse=True)
    sums = np.bincount(inverse, weights=vals, minlength=keys.shape[0])
    counts = np.bincount(inverse, minlength=keys.shape[0])
    return CandidateSet(keys.astype(np.int64), sums, counts)


def _fill_recent(chosen: np.ndarray, n: int, k: int) -> np.ndarray:
    """Top up ``chosen`` to ``k`` positions with the most recent unselected ones."""
    missing = k - chosen.shape[0]
    if missing <= 0:
        return chosen
    taken = np.zeros(n, dtype=bool)
    taken[chosen] = True
    extra = np.flatnonzero(~taken)[::-1][:missing]
    return np.concatenate([chosen, extra])


def select_topk(candidates: CandidateSet, kv, cfg: RetrievalConfig, k: Optional[int] = None, window: Optional[int] = None) -> np.ndarray:
    """Choose the ``K = max(1, ceil(rho * N))`` positions to attend, ascending.

    ``kv`` is a :class:`KvStore` or the current length ``N``.  With
    passthrough the newest ``R`` positions are always kept and the rest are
    ranked by accumulated score; otherwise window positions compete with
    their accumulated score (0 if absent).  If candidates run out the set is
    topped up with the most recent unselected positions.
    """
    n = kv.total_len if isinstance(kv, KvStore) else int(kv)
    if n < 1:
        raise ParameterError("cannot select from an empty context")
    K = cfg.keep_count(n) if k is None else int(k)
    R = cfg.recent_window if window is None else int(window)
    if not 1 <= K <= n:
        raise ParameterError(f"K={K} outside [1, {n}]")
    w = min(R, n)
    win_start = n - w
    cand_idx, cand_scores = candidates.indices, candidates.scores
    valid = cand_idx < n
    cand_idx, cand_scores = cand_idx[valid], cand_scores[valid]

    if cfg.recent_passthrough:
        if K <= w:
            return np.arange(n - K, n)
        outside = cand_idx < win_start
        ci, cs = cand_idx[outside], cand_scores[outside]
        top = ci[np.lexsort((ci, -cs))[: K - w]]
        chosen = np.concatenate([top, np.arange(win_start, n)])
    else:
        window_idx = np.arange(win_start, n)
        absent = ~np.isin(window_idx, cand_idx)
        ci = np.concatenate([cand_idx, window_idx[absent]])
        cs = np.concatenate([cand_scores, np.zeros(int(absent.sum()))])
        chosen = ci[np.lexsort((ci, -cs))[:K]]
    return np.sort(_fill_recent(chosen, n, K))


@dataclass
class SearchState:
    """Per-head decode bookkeeping for search reuse."""

    step: int = 0
    cached: Optional[CandidateSet] = None
    last_search_step: int = -1


def decode_search(
    q,
    index: CsIndex,
    kv: KvStore,
    cfg: RetrievalConfig,
    state: SearchState,
    counters: Optional[CostCounters] = None,
) -> np.ndarray:
    """One decode-step selection.  Searches on every ``search_period``-th step and reuses the cached candidates otherwise.

    The recent window and ``K`` always follow the current context length.
    """
    n = kv.total_len
    searched = state.cached is None or state.step % cfg.search_period == 0
    K = cfg.keep_count(n)
    R = cfg.recent_window
    if searched:
        selection, best = select_centroids(q, index, cfg.backoff_tau, cfg.backoff_threshold)
        lists = gather_lists(index, selection)
        state.cached = reduce_by_key(lists, cfg.weight_vector(index.m))
        state.last_search_step = state.step
        if cfg.bump_hook is not None:
            R, K = cfg.bump_hook(q, best, R, K)
            K = min(max(1, K), n)
        if counters is not None:
            gathered = sum(len(g.table) for g in lists)
            counters.searches += 1
            counters.centroid_dot_ops += index.C * index.d
            counters.lists_gathered += len(lists)
            counters.gathered_entries += gathered
            counters.reduce_ops += gathered
            counters.candidates += len(state.cached)
    selected = select_topk(state.cached, n, cfg, k=K, window=R)
    state.step += 1
    return selected


@dataclass
class InsertReport:
    key_index: int
    applied: np.ndarray  # (m, C) bool

    @property
    def attempted(self) -> int:
        return int(self.applied.size)

    @property
    def n_applied(self) -> int:
        return int(self.applied.sum())


def streaming_insert(new_key, key_index: int, index: CsIndex) -> InsertReport:
    """Offer a newly appended key to every (subspace, centroid) Top-L list."""
    new_key = as_head_vector(new_key, index.d)
    applied = np.zeros((index.m, index.C), dtype=bool)
    for b, kb in enumerate(index.key_slices(new_key)):
        scores = score_keys(index.centroid_matrix(b), kb[None, :])[:, 0]
        row = index.tables[b]
        thresholds = np.array([t.threshold for t in row])
        for j in np.flatnonzero(scores.astype(ACC_DTYPE) > thresholds):
            applied[b, j] = row[j].try_insert(key_index, scores[j])
    return InsertReport(key_index, applied)
