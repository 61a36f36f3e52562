"""Offline index: per-(subspace, centroid) Top-L lists of centroid->key scores."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .clustering import CentroidSet, ClusterConfig, cosine_kmeans
from .core import (
    ACC_DTYPE,
    DTYPE,
    DimensionError,
    KvStore,
    ParameterError,
    SubspaceLayout,
    as_matrix,
    ceil_ratio,
    l2_normalize_rows,
    rank_desc,
)

MAGIC = b"CSAT"
FORMAT_VERSION = 1
FLAG_SCORES_F16 = 1 << 0
FLAG_NORMALIZED_KEYS = 1 << 1
_HEADER = struct.Struct("<4sHHIIIIQ")

# float16 centroids carry ~2^-11 relative error per element
F16_UNIT_TOL = 2e-3


class TopList:
    """Fixed-capacity list of (key index, score), score descending, lower index first on ties."""

    __slots__ = ("capacity", "_idx", "_scores", "_n")

    def __init__(self, capacity: int, indices=None, scores=None):
        if capacity < 0:
            raise ParameterError("capacity must be >= 0")
        self.capacity = int(capacity)
        self._idx = np.empty(self.capacity, dtype=np.int64)
        self._scores = np.empty(self.capacity, dtype=DTYPE)
        self._n = 0
        if indices is not None:
            indices = np.asarray(indices, dtype=np.int64)
            scores = np.asarray(scores, dtype=DTYPE)
            if indices.shape != scores.shape or indices.ndim != 1:
                raise ValueError("indices and scores must be aligned 1-D arrays")
            if indices.shape[0] > self.capacity:
                raise ValueError(f"{indices.shape[0]} entries exceed capacity {self.capacity}")
            self._n = indices.shape[0]
            self._idx[: self._n] = indices
            self._scores[: self._n] = scores

    @property
    def indices(self) -> np.ndarray:
        return self._idx[: self._n]

    @property
    def scores(self) -> np.ndarray:
        return self._scores[: self._n]

    def __len__(self) -> int:
        return self._n

    @property
    def full(self) -> bool:
        return self._n >= self.capacity

    @property
    def min_score(self) -> float:
        return float(self._scores[self._n - 1]) if self._n else float("-inf")

    @property
    def threshold(self) -> float:
        """Scores must strictly exceed this to enter the list."""
        return self.min_score if self.full else float("-inf")

    def try_insert(self, index: int, score: float) -> bool:
        """Insert ``(index, score)`` if it ranks inside the capacity; evicts the minimum when full."""
        if self.capacity == 0:
            return False
        score = DTYPE(score)
        n = self._n
        s = self._scores[:n]
        # first position whose entry ranks below the newcomer
        lo = int(np.searchsorted(-s, -score, side="left"))
        hi = int(np.searchsorted(-s, -score, side="right"))
        pos = lo + int(np.searchsorted(self._idx[lo:hi], index, side="left"))
        if pos >= self.capacity:
            return False
        end = min(n, self.capacity - 1)
        self._idx[pos + 1 : end + 1] = self._idx[pos:end]
        self._scores[pos + 1 : end + 1] = self._scores[pos:end]
        self._idx[pos] = index
        self._scores[pos] = score
        self._n = end + 1
        return True

    def check(self) -> None:
        """Raise ``ValueError`` if the list breaks its invariants."""
        if self._n > self.capacity:
            raise ValueError("length exceeds capacity")
        s = self.scores
        if s.size > 1 and np.any(s[1:] > s[:-1]):
            raise ValueError("scores are not sorted descending")
        if np.unique(self.indices).size != self._n:
            raise ValueError("duplicate key indices")
        if np.any(self.indices < 0):
            raise ValueError("negative key index")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite score")

    def copy(self) -> "TopList":
        return TopList(self.capacity, self.indices.copy(), self.scores.copy())

    def __eq__(self, other):
        if not isinstance(other, TopList):
            return NotImplemented
        return (
            self.capacity == other.capacity
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.scores, other.scores)
        )

    def __repr__(self):
        return f"TopList(capacity={self.capacity}, entries={list(zip(self.indices.tolist(), self.scores.tolist()))})"


def score_keys(centroids, keys) -> np.ndarray:
    """Inner products of (unit) centroids with key subvectors.

    ``centroids`` is ``(C, d_b)`` or a single ``(d_b,)`` vector; ``keys`` is
    ``(n, d_b)``.  Returns float32 scores ``(C, n)`` (or ``(n,)``).  The sum
    runs column by column in float64 so a score does not depend on how many
    keys are scored together: the streaming and batch paths agree bit for bit.
    """
    c = np.asarray(centroids, dtype=DTYPE)
    single = c.ndim == 1
    c = np.atleast_2d(c).astype(ACC_DTYPE)
    k = np.asarray(keys, dtype=DTYPE)
    if k.ndim == 1:
        k = k.reshape(1, -1) if k.size else k.reshape(0, c.shape[1])
    if k.shape[1] != c.shape[1]:
        raise DimensionError(f"key width {k.shape[1]} vs centroid width {c.shape[1]}")
    k = k.astype(ACC_DTYPE)
    acc = np.zeros((c.shape[0], k.shape[0]), dtype=ACC_DTYPE)
    for t in range(c.shape[1]):
        acc += c[:, t, None] * k[None, :, t]
    out = acc.astype(DTYPE)
    return out[0] if single else out


def build_toplist(scores, L: int) -> TopList:
    """The ``L`` best (index, score) pairs of ``scores`` (index = position)."""
    if L < 1:
        raise ParameterError("L must be >= 1")
    scores = np.asarray(scores, dtype=DTYPE)
    order = rank_desc(scores)[:L]
    return TopList(L, order, scores[order])


def list_capacity(alpha: float, prefill_len: int) -> int:
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    return max(1, ceil_ratio(alpha, prefill_len))


@dataclass
class BuildStats:
    """Operation counts of the offline build (multiply-adds unless named otherwise)."""

    kmeans_dot_ops: int = 0
    scoring_dot_ops: int = 0
    topl_candidates: int = 0
    degenerate_queries: int = 0


@dataclass(eq=False)
class CsIndex:
    layout: SubspaceLayout
    centroid_sets: list[CentroidSet]
    tables: list[list[TopList]]
    alpha: float
    prefill_len: int
    capacity: int
    normalize_keys: bool = False
    build_stats: BuildStats = field(default_factory=BuildStats)

    @property
    def m(self) -> int:
        return self.layout.m

    @property
    def C(self) -> int:
        return self.centroid_sets[0].C

    @property
    def d(self) -> int:
        return self.layout.d

    def table(self, b: int, j: int) -> TopList:
        return self.tables[b][j]

    def n_tables(self) -> int:
        return sum(len(row) for row in self.tables)

    def fill_levels(self) -> np.ndarray:
        return np.array([[len(t) for t in row] for row in self.tables])

    def thresholds(self) -> np.ndarray:
        return np.array([[t.threshold for t in row] for row in self.tables], dtype=ACC_DTYPE)

    def centroid_matrix(self, b: int) -> np.ndarray:
        return self.centroid_sets[b].centroids

    def key_slices(self, key) -> list[np.ndarray]:
        """Subvectors of ``key`` in the form the tables score them."""
        key = np.asarray(key, dtype=DTYPE)
        parts = [key[self.layout.slice(b)] for b in range(self.m)]
        if self.normalize_keys:
            parts = [l2_normalize_rows(p[None, :])[0][0] for p in parts]
        return parts

    def validate(self, unit_tol: float = 1e-5) -> None:
        """Raise ``ValueError`` on any structural invariant violation."""
        if len(self.centroid_sets) != self.m or len(self.tables) != self.m:
            raise ValueError("subspace count mismatch")
        C = self.C
        for b, (cs, row) in enumerate(zip(self.centroid_sets, self.tables)):
            if cs.C != C or cs.width != self.layout.sizes[b]:
                raise ValueError(f"subspace {b}: centroid shape {cs.centroids.shape} is inconsistent")
            cs.check_unit(unit_tol)
            if len(row) != C:
                raise ValueError(f"subspace {b}: {len(row)} tables for {C} centroids")
            for j, t in enumerate(row):
                if t.capacity != self.capacity:
                    raise ValueError(f"table ({b},{j}) capacity {t.capacity} != {self.capacity}")
                try:
                    t.check()
                except ValueError as e:
                    raise ValueError(f"table ({b},{j}): {e}") from None

    def copy(self) -> "CsIndex":
        return CsIndex(
            self.layout,
            [CentroidSet(cs.subspace_id, cs.centroids.copy(), cs.duplicated.copy()) for cs in self.centroid_sets],
            [[t.copy() for t in row] for row in self.tables],
            self.alpha,
            self.prefill_len,
            self.capacity,
            self.normalize_keys,
            BuildStats(**vars(self.build_stats)),
        )

    def same_content(self, other: "CsIndex") -> bool:
        """Field-by-field equality of layout, centroids, capacities and tables."""
        return (
            self.layout == other.layout
            and self.prefill_len == other.prefill_len
            and self.capacity == other.capacity
            and self.normalize_keys == other.normalize_keys
            and all(np.array_equal(a.centroids, b.centroids) for a, b in zip(self.centroid_sets, other.centroid_sets))
            and all(a == b for ra, rb in zip(self.tables, other.tables) for a, b in zip(ra, rb))
        )


def score_tables(
    centroid_sets: Sequence[CentroidSet],
    keys,
    layout: SubspaceLayout,
    capacity: int,
    normalize_keys: bool = False,
) -> list[list[TopList]]:
    """Score every key against every centroid and keep the Top-``capacity`` list per centroid."""
    keys = as_matrix(keys, layout.d)
    tables = []
    for b, cs in enumerate(centroid_sets):
        kb = keys[:, layout.slice(b)]
        if normalize_keys:
            kb, _ = l2_normalize_rows(kb)
        scores = score_keys(cs.centroids, kb)  # (C, n): one batched pass across centroids
        tables.append([build_toplist(row, capacity) for row in scores])
    return tables


def _queries_2d(prefill_queries, d: int, pool_heads: bool) -> np.ndarray:
    q = np.asarray(prefill_queries, dtype=DTYPE)
    if q.ndim == 3:
        if not pool_heads:
            raise ParameterError("per-query-head clustering: build one index per head from 2-D queries")
        q = q.reshape(-1, q.shape[-1])
    return as_matrix(q, d)


def build_index(
    prefill_queries,
    kv: KvStore,
    layout: SubspaceLayout,
    cluster_cfg: ClusterConfig,
    alpha: float = 0.2,
    *,
    list_size: Optional[int] = None,
    normalize_keys: bool = False,
    centroid_sets: Optional[Sequence[CentroidSet]] = None,
) -> CsIndex:
    """Cluster prefill queries per subspace, then score prefill keys into Top-L lists.

    ``prefill_queries`` may be ``(n, d)`` or ``(heads, n, d)``; the latter is
    pooled into one distribution for the KV head.  ``list_size`` overrides the
    ``ceil(alpha * prefill_len)`` capacity.  ``centroid_sets`` skips clustering.
    """
    if kv.d != layout.d:
        raise DimensionError(f"KV width {kv.d} vs layout width {layout.d}")
    P = kv.prefill_len
    if P < 1:
        raise ParameterError("index build needs at least one prefill key")
    L = list_capacity(alpha, P) if list_size is None else int(list_size)
    if L < 1:
        raise ParameterError("list size must be >= 1")
    stats = BuildStats()
    if centroid_sets is None:
        queries = _queries_2d(prefill_queries, layout.d, cluster_cfg.pool_heads)
        if queries.shape[0] == 0:
            raise ParameterError("no prefill queries")
        centroid_sets = []
        for b in range(layout.m):
            qb = queries[:, layout.slice(b)]
            stats.degenerate_queries += int((~np.any(qb != 0, axis=1)).sum())
            centroid_sets.append(cosine_kmeans(qb, cluster_cfg, subspace_id=b))
        batch = cluster_cfg.effective_batch(queries.shape[0])
        stats.kmeans_dot_ops = cluster_cfg.iterations * batch * cluster_cfg.n_centroids * layout.d
    else:
        centroid_sets = list(centroid_sets)
        if len(centroid_sets) != layout.m:
            raise ParameterError(f"{len(centroid_sets)} centroid sets for {layout.m} subspaces")
    C = centroid_sets[0].C
    tables = score_tables(centroid_sets, kv.keys[:P], layout, L, normalize_keys)
    stats.scoring_dot_ops = P * C * layout.d
    stats.topl_candidates = P * C * layout.m
    return CsIndex(layout, centroid_sets, tables, float(alpha), P, L, normalize_keys, stats)


# ---------------------------------------------------------------- file format


class IndexFormatError(ValueError):
    """Base class for index-file load failures."""


class BadMagicError(IndexFormatError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class TruncatedFileError(IndexFormatError):
    pass


class InvariantViolationError(IndexFormatError):
    pass


def serialize_index(index: CsIndex, score_bits: int = 32) -> bytes:
    """Encode ``index`` little-endian.  ``score_bits=16`` stores scores and centroids as float16."""
    if score_bits not in (16, 32):
        raise ParameterError("score_bits must be 16 or 32")
    ftype = np.dtype("<f2") if score_bits == 16 else np.dtype("<f4")
    flags = (FLAG_SCORES_F16 if score_bits == 16 else 0) | (FLAG_NORMALIZED_KEYS if index.normalize_keys else 0)
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, flags, index.m, index.C, index.capacity, index.d, index.prefill_len),
        np.asarray(index.layout.sizes, dtype="<u4").tobytes(),
    ]
    for cs in index.centroid_sets:
        parts.append(_to_float(cs.centroids, ftype).tobytes())
    for row in index.tables:
        for t in row:
            parts.append(struct.pack("<I", len(t)))
            parts.append(t.indices.astype("<u4").tobytes())
            parts.append(_to_float(t.scores, ftype).tobytes())
    return b"".join(parts)


def _to_float(x: np.ndarray, ftype: np.dtype) -> np.ndarray:
    if ftype.itemsize == 2 and x.size and np.abs(x).max() > np.finfo(np.float16).max:
        raise ParameterError("value exceeds the float16 range; use 32-bit scores")
    return np.asarray(x).astype(ftype)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated while reading {what}: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count)


def deserialize_index(data: bytes) -> CsIndex:
    """Decode bytes produced by :func:`serialize_index`, rejecting malformed or inconsistent input."""
    r = _Reader(bytes(data))
    if len(r.data) < 4 or bytes(r.data[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(r.data[:4])!r}, expected {MAGIC!r}")
    magic, version, flags, m, C, L, d, P = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this reader supports {FORMAT_VERSION}")
    if flags & ~(FLAG_SCORES_F16 | FLAG_NORMALIZED_KEYS):
        raise InvariantViolationError(f"unknown flag bits 0x{flags:04x}")
    if m < 1 or C < 1 or L < 1 or P < 1:
        raise InvariantViolationError(f"invalid dimensions m={m} C={C} L={L} prefill={P}")
    ftype = "<f2" if flags & FLAG_SCORES_F16 else "<f4"
    sizes = r.array("<u4", m, "subspace sizes")
    if int(sizes.sum()) != d or np.any(sizes < 1):
        raise InvariantViolationError(f"subspace sizes {sizes.tolist()} do not sum to d={d}")
    layout = SubspaceLayout(tuple(int(s) for s in sizes))
    centroid_sets = []
    for b in range(m):
        cents = r.array(ftype, C * layout.sizes[b], f"centroids of subspace {b}")
        centroid_sets.append(CentroidSet(b, cents.astype(DTYPE).reshape(C, layout.sizes[b])))
    tables = []
    for b in range(m):
        row = []
        for j in range(C):
            (n,) = struct.unpack("<I", r.take(4, f"length of table ({b},{j})"))
            if n > L:
                raise InvariantViolationError(f"table ({b},{j}) holds {n} entries, capacity is {L}")
            idx = r.array("<u4", n, f"indices of table ({b},{j})")
            sc = r.array(ftype, n, f"scores of table ({b},{j})")
            row.append(TopList(L, idx.astype(np.int64), sc.astype(DTYPE)))
        tables.append(row)
    if r.pos != len(r.data):
        raise InvariantViolationError(f"{len(r.data) - r.pos} trailing bytes after offset {r.pos}")
    index = CsIndex(layout, centroid_sets, tables, L / P, P, L, bool(flags & FLAG_NORMALIZED_KEYS))
    try:
        index.validate(unit_tol=F16_UNIT_TOL if flags & FLAG_SCORES_F16 else 1e-5)
    except ValueError as e:
        raise InvariantViolationError(str(e)) from None
    return index


def payload_bytes(index: CsIndex, score_bits: int = 16) -> dict:
    """Byte breakdown of the serialized form; ``payload`` excludes header and per-list length words."""
    s = score_bits // 8
    entries = int(index.fill_levels().sum())
    out = {
        "list_index_bytes": 4 * entries,
        "list_score_bytes": s * entries,
        "centroid_bytes": s * index.C * index.d,
        "header_bytes": _HEADER.size + 4 * index.m + 4 * index.m * index.C,
    }
    out["payload"] = out["list_index_bytes"] + out["list_score_bytes"] + out["centroid_bytes"]
    out["total"] = out["payload"] + out["header_bytes"]
    return out


def save_index(index: CsIndex, path, score_bits: int = 32) -> int:
    data = serialize_index(index, score_bits)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_index(path) -> CsIndex:
    with open(path, "rb") as f:
        return deserialize_index(f.read())
