"""Centroid-scoring sparse attention: offline query-centric score tables, bounded online retrieval."""

from .clustering import CentroidSet, ClusterConfig, assign_nearest, cosine_kmeans, kmeanspp_seed
from .core import (
    AttentionOutput,
    DimensionError,
    KvStore,
    ParameterError,
    SubspaceLayout,
    dense_attention,
    dense_topk,
    l2_normalize,
    split_subspaces,
)
from .counters import CostCounters, recall_at_k
from .harness import SweepResult, h2d_bytes, sweep, table_bytes
from .index import (
    BadMagicError,
    CsIndex,
    IndexFormatError,
    InvariantViolationError,
    TopList,
    TruncatedFileError,
    VersionMismatchError,
    build_index,
    build_toplist,
    deserialize_index,
    score_keys,
    serialize_index,
)
from .retrieval import (
    SCHEDULES,
    CandidateSet,
    RetrievalConfig,
    SearchState,
    decode_search,
    gather_lists,
    reduce_by_key,
    select_centroids,
    select_topk,
    streaming_insert,
)
from .sim import DecodeStepReport, Session, decode_step, prefill, run_decode, synthetic_workload

__version__ = "0.1.0"
