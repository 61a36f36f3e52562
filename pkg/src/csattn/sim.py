"""Single-head prefill -> decode driver, synthetic workloads and embedding dump files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .clustering import ClusterConfig
from .core import (
    DTYPE,
    AttentionOutput,
    DimensionError,
    KvStore,
    ParameterError,
    SubspaceLayout,
    as_head_vector,
    as_matrix,
    dense_attention,
    dense_topk,
)
from .counters import CostCounters, recall_at_k
from .index import CsIndex, build_index
from .retrieval import RetrievalConfig, SearchState, decode_search, streaming_insert


class StreamExhaustedError(RuntimeError):
    pass


@dataclass
class Session:
    kv: KvStore
    index: CsIndex
    cfg: RetrievalConfig
    seed: int = 0
    step: int = 0
    bytes_per_elem: int = 2
    state: SearchState = field(default_factory=SearchState)
    _last_selected: Optional[np.ndarray] = field(default=None, repr=False)

    def check(self) -> None:
        if self.kv.total_len != self.kv.prefill_len + self.step:
            raise AssertionError(f"context length {self.kv.total_len} != {self.kv.prefill_len} + {self.step}")
        if self.index.prefill_len != self.kv.prefill_len:
            raise AssertionError("index and KV store disagree on the prefill length")


@dataclass
class DecodeStepReport:
    step: int
    n_context: int
    K: int
    selected: np.ndarray
    searched: bool
    attention: AttentionOutput
    counters: CostCounters
    dense_reference: Optional[AttentionOutput] = None
    recall_at_k: Optional[float] = None
    output_error: Optional[float] = None


def prefill(
    queries,
    keys,
    values,
    layout: SubspaceLayout,
    cluster_cfg: ClusterConfig,
    alpha: float = 0.2,
    cfg: Optional[RetrievalConfig] = None,
    *,
    list_size: Optional[int] = None,
    normalize_keys: bool = False,
    centroid_sets=None,
) -> Session:
    """Load the prefill KV and build its index.  ``queries`` may carry a leading head axis (GQA group)."""
    keys = as_matrix(keys, layout.d)
    values = as_matrix(values, layout.d)
    q = np.asarray(queries, dtype=DTYPE)
    if q.shape[-2] != keys.shape[0]:
        raise DimensionError(f"{q.shape[-2]} prefill queries for {keys.shape[0]} keys")
    if values.shape[0] != keys.shape[0]:
        raise DimensionError(f"{values.shape[0]} values for {keys.shape[0]} keys")
    kv = KvStore(keys, values)
    index = build_index(
        q, kv, layout, cluster_cfg, alpha,
        list_size=list_size, normalize_keys=normalize_keys, centroid_sets=centroid_sets,
    )
    return Session(kv, index, cfg or RetrievalConfig(), seed=cluster_cfg.seed)


def decode_step(session: Session, q, new_key, new_value, compare_dense: bool = False) -> DecodeStepReport:
    """Select, attend over the selection, append the new token's KV, and offer its key to the tables.

    The query attends to the context before its own key is appended.
    """
    kv, index, cfg = session.kv, session.index, session.cfg
    q = as_head_vector(q, kv.d)
    counters = CostCounters()
    selected = decode_search(q, index, kv, cfg, session.state, counters)
    searched = counters.searches > 0
    n, K = kv.total_len, selected.shape[0]
    attention = dense_attention(q, kv, selected)
    counters.attention_key_ops = K * kv.d
    prev = session._last_selected
    moved = K if prev is None or searched else int(np.setdiff1d(selected, prev, assume_unique=True).size)
    counters.h2d_bytes_model = 2 * moved * kv.d * session.bytes_per_elem
    session._last_selected = selected

    report = DecodeStepReport(session.step, n, K, selected, searched, attention, counters)
    if compare_dense:
        report.dense_reference = dense_attention(q, kv)
        report.recall_at_k = recall_at_k(selected, dense_topk(q, kv, K))
        report.output_error = float(np.linalg.norm(attention.output - report.dense_reference.output))

    pos = kv.append(new_key, new_value)
    ins = streaming_insert(new_key, pos, index)
    counters.inserts_attempted = ins.attempted
    counters.inserts_applied = ins.n_applied
    session.step += 1
    return report


def run_decode(session: Session, queries: Iterable, keys: Iterable, values: Iterable, steps: int, compare_dense: bool = False) -> list[DecodeStepReport]:
    reports = []
    streams = [iter(queries), iter(keys), iter(values)]
    for t in range(steps):
        items = []
        for name, it in zip(("query", "key", "value"), streams):
            try:
                items.append(next(it))
            except StopIteration:
                raise StreamExhaustedError(f"{name} stream exhausted at decode step {t} of {steps}") from None
        reports.append(decode_step(session, *items, compare_dense=compare_dense))
    return reports


# ------------------------------------------------------------ synthetic data


@dataclass
class Workload:
    prefill_q: np.ndarray
    prefill_k: np.ndarray
    prefill_v: np.ndarray
    decode_q: np.ndarray
    decode_k: np.ndarray
    decode_v: np.ndarray

    @property
    def d(self) -> int:
        return self.prefill_k.shape[1]

    @property
    def prefill_len(self) -> int:
        return self.prefill_k.shape[0]

    def all_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.concatenate([self.prefill_q, self.decode_q]),
            np.concatenate([self.prefill_k, self.decode_k]),
            np.concatenate([self.prefill_v, self.decode_v]),
        )


def _planted_keys(rng, n, dirs, plant_frac, strength):
    d = dirs.shape[1]
    keys = rng.standard_normal((n, d))
    planted = rng.random(n) < plant_frac
    owner = rng.integers(dirs.shape[0], size=n)
    beta = rng.random(n) * strength * np.sqrt(d)
    keys[planted] += beta[planted, None] * dirs[owner[planted]]
    return keys


def synthetic_workload(
    prefill_len: int,
    d: int,
    n_clusters: int = 16,
    decode_len: int = 0,
    seed: int = 0,
    *,
    query_noise: float = 0.5,
    query_scale: float = 4.0,
    plant_frac: float = 0.5,
    plant_strength: float = 1.0,
    segment_len: float = 16.0,
    drift: float = 0.8,
) -> Workload:
    """Clustered queries and Gaussian keys with planted high-inner-product keys per cluster.

    Each query is ``query_scale * (u_c + noise)`` for a random unit direction
    ``u_c``.  A ``plant_frac`` share of keys gets ``beta * sqrt(d) * u_c`` added
    with ``beta ~ U(0, plant_strength)``, so relevance is graded.  Decode
    queries stay on one cluster for geometric segments of mean
    ``segment_len`` steps and their noise follows an AR(1) walk (``drift``).
    The prefill does not depend on ``decode_len`` and a longer decode stream
    extends a shorter one.
    """
    if prefill_len < 1 or d < 1 or n_clusters < 1 or decode_len < 0:
        raise ParameterError("synthetic workload needs positive sizes")
    pre_rng, dec_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    dirs = pre_rng.standard_normal((n_clusters, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    noise_sd = query_noise / np.sqrt(d)

    labels = pre_rng.integers(n_clusters, size=prefill_len)
    pq = query_scale * (dirs[labels] + noise_sd * pre_rng.standard_normal((prefill_len, d)))
    pk = _planted_keys(pre_rng, prefill_len, dirs, plant_frac, plant_strength)
    pv = pre_rng.standard_normal((prefill_len, d))

    dq, dk, dv = (np.empty((decode_len, d)) for _ in range(3))
    noise = dec_rng.standard_normal(d)
    c = int(dec_rng.integers(n_clusters))
    for t in range(decode_len):
        # one token at a time so a longer stream extends a shorter one
        if t and dec_rng.random() < 1.0 / segment_len:
            c = int(dec_rng.integers(n_clusters))
        noise = drift * noise + np.sqrt(1.0 - drift**2) * dec_rng.standard_normal(d)
        dq[t] = query_scale * (dirs[c] + noise_sd * noise)
        dk[t] = _planted_keys(dec_rng, 1, dirs, plant_frac, plant_strength)[0]
        dv[t] = dec_rng.standard_normal(d)
    f = lambda x: x.astype(DTYPE)
    return Workload(f(pq), f(pk), f(pv), f(dq), f(dk), f(dv))


# ---------------------------------------------------------------- dump files

DUMP_MAGIC = b"CSQK"
DUMP_VERSION = 1
ROLES = {"q": 0, "k": 1, "v": 2}
_DUMP_HEADER = struct.Struct("<4sHBQI")


class DumpFormatError(ValueError):
    pass


def write_dump(path, role: str, rows) -> None:
    """Write one role ('q', 'k' or 'v') of an embedding dump."""
    rows = as_matrix(rows)
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, ROLES[role], rows.shape[0], rows.shape[1]))
        f.write(rows.astype("<f4").tobytes())


def read_dump(path, role: Optional[str] = None) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _DUMP_HEADER.size:
        raise DumpFormatError(f"{path}: truncated header ({len(data)} of {_DUMP_HEADER.size} bytes at offset 0)")
    magic, version, role_id, count, d = _DUMP_HEADER.unpack_from(data)
    if magic != DUMP_MAGIC:
        raise DumpFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != DUMP_VERSION:
        raise DumpFormatError(f"{path}: unsupported version {version} at offset 4")
    if role_id not in ROLES.values():
        raise DumpFormatError(f"{path}: unknown role {role_id} at offset 6")
    if role is not None and role_id != ROLES[role]:
        raise DumpFormatError(f"{path}: role {role_id} at offset 6, expected {ROLES[role]} ({role})")
    need = _DUMP_HEADER.size + 4 * count * d
    if len(data) != need:
        raise DumpFormatError(
            f"{path}: payload size mismatch, {count}x{d} rows need {need} bytes, file has {len(data)} "
            f"(data starts at offset {_DUMP_HEADER.size})"
        )
    rows = np.frombuffer(data, dtype="<f4", offset=_DUMP_HEADER.size).reshape(count, d).astype(DTYPE)
    if not np.all(np.isfinite(rows)):
        bad = int(np.flatnonzero(~np.isfinite(rows).all(axis=1))[0])
        raise DumpFormatError(f"{path}: non-finite value in row {bad} (offset {_DUMP_HEADER.size + 4 * bad * d})")
    return rows
