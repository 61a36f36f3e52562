"""Vector types, subspace arithmetic and the exact dense-attention reference.

Everything in memory is float32; dot products and softmax denominators are
accumulated in float64.  Ties in any ranking are broken by the lower index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

DTYPE = np.float32
ACC_DTYPE = np.float64


class DimensionError(ValueError):
    """A vector or matrix does not have the width the layout expects."""


class ParameterError(ValueError):
    """A count, ratio or index argument is out of its valid range."""


def as_head_vector(v, d: Optional[int] = None) -> np.ndarray:
    """Validate ``v`` as a finite 1-D vector (of width ``d`` if given) and return it as float32."""
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise DimensionError(f"expected width {d}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def as_matrix(x, d: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1 and arr.shape[0] == 0:
        arr = arr.reshape(0, d or 0)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise DimensionError(f"expected width {d}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


def ceil_ratio(ratio: float, n: int) -> int:
    """``ceil(ratio * n)`` evaluated on the decimal value of ``ratio``.

    ``0.15 * 20`` is ``3.0000000000000004`` in binary floating point; going
    through the shortest decimal repr keeps ``ceil`` from overshooting.
    """
    return math.ceil(Fraction(repr(float(ratio))) * n)


@dataclass(frozen=True)
class SubspaceLayout:
    """Split of a head dimension into ``m`` contiguous subspaces."""

    sizes: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ParameterError("layout needs at least one subspace")
        if any(s < 1 for s in sizes):
            raise ParameterError(f"subspace widths must be >= 1, got {sizes}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", tuple(int(o) for o in np.cumsum((0,) + sizes[:-1])))

    @classmethod
    def uniform(cls, d: int, m: int) -> "SubspaceLayout":
        """Near-uniform split; when ``m`` does not divide ``d`` the first subspaces get one extra."""
        if m < 1 or d < m:
            raise ParameterError(f"cannot split d={d} into m={m} subspaces")
        base, extra = divmod(d, m)
        return cls(tuple(base + (1 if b < extra else 0) for b in range(m)))

    @property
    def m(self) -> int:
        return len(self.sizes)

    @property
    def d(self) -> int:
        return sum(self.sizes)

    def slice(self, b: int) -> slice:
        return slice(self.offsets[b], self.offsets[b] + self.sizes[b])


def split_subspaces(v, layout: SubspaceLayout) -> list[np.ndarray]:
    """Return the ``m`` contiguous slices of ``v`` (views, not copies)."""
    arr = np.asarray(v)
    if arr.ndim != 1 or arr.shape[0] != layout.d:
        raise DimensionError(f"vector of shape {arr.shape} does not match layout width {layout.d}")
    return [arr[layout.slice(b)] for b in range(layout.m)]


def subspace_partials(q, k, layout: SubspaceLayout) -> np.ndarray:
    """Per-subspace partial inner products; they sum to ``q . k``."""
    qs = split_subspaces(q, layout)
    ks = split_subspaces(k, layout)
    return np.array([np.dot(a.astype(ACC_DTYPE), b.astype(ACC_DTYPE)) for a, b in zip(qs, ks)])


def l2_normalize(v) -> tuple[np.ndarray, bool]:
    """Unit-normalize ``v``.  Returns ``(unit, degenerate)``; a zero vector comes back as zeros."""
    arr = np.asarray(v, dtype=DTYPE)
    norm = np.sqrt(np.dot(arr.astype(ACC_DTYPE), arr.astype(ACC_DTYPE)))
    if norm == 0.0:
        return np.zeros_like(arr), True
    return (arr.astype(ACC_DTYPE) / norm).astype(DTYPE), False


def l2_normalize_rows(x) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise version of :func:`l2_normalize`; returns ``(units, degenerate_mask)``."""
    arr = np.asarray(x, dtype=DTYPE)
    acc = arr.astype(ACC_DTYPE)
    norms = np.sqrt(np.einsum("ij,ij->i", acc, acc))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    out = (acc / safe[:, None]).astype(DTYPE)
    out[degenerate] = 0.0
    return out, degenerate


class KvStore:
    """Append-only key/value store with a fixed prefill boundary."""

    def __init__(self, keys, values, prefill_len: Optional[int] = None):
        keys = as_matrix(keys)
        values = as_matrix(values)
        if keys.shape[0] != values.shape[0]:
            raise DimensionError(f"{keys.shape[0]} keys but {values.shape[0]} values")
        if keys.shape[1] != values.shape[1]:
            raise DimensionError("keys and values must share the head dimension")
        n, d = keys.shape
        self.d = d
        self._prefill_len = n if prefill_len is None else int(prefill_len)
        if not 0 <= self._prefill_len <= n:
            raise ParameterError(f"prefill_len {self._prefill_len} outside [0, {n}]")
        cap = max(16, 2 * n)
        self._keys = np.empty((cap, d), dtype=DTYPE)
        self._values = np.empty((cap, d), dtype=DTYPE)
        self._keys[:n] = keys
        self._values[:n] = values
        self._n = n

    @property
    def prefill_len(self) -> int:
        return self._prefill_len

    @property
    def total_len(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        view = self._keys[: self._n]
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        view = self._values[: self._n]
        view.flags.writeable = False
        return view

    def append(self, key, value) -> int:
        """Append one (key, value) pair and return its position."""
        key = as_head_vector(key, self.d)
        value = as_head_vector(value, self.d)
        if self._n == self._keys.shape[0]:
            self._keys = np.concatenate([self._keys, np.empty_like(self._keys)])
            self._values = np.concatenate([self._values, np.empty_like(self._values)])
        self._keys[self._n] = key
        self._values[self._n] = value
        self._n += 1
        return self._n - 1


@dataclass
class AttentionOutput:
    indices: np.ndarray
    weights: np.ndarray
    output: np.ndarray


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=ACC_DTYPE)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def dense_attention(q, kv: KvStore, mask: Optional[Sequence[int]] = None) -> AttentionOutput:
    """Exact scaled dot-product attention of ``q`` over ``kv`` (optionally restricted to ``mask``).

    Logits are always scaled by ``1/sqrt(d)``, also for a restricted set, and
    the softmax is renormalised over the kept keys only.
    """
    q = as_head_vector(q, kv.d)
    n = kv.total_len
    if n == 0:
        raise ParameterError("attention over an empty KV store")
    if mask is None:
        idx = np.arange(n)
    else:
        idx = np.asarray(mask, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ParameterError("attention mask is empty")
        if idx.min() < 0 or idx.max() >= n:
            raise ParameterError(f"mask indices must lie in [0, {n})")
    keys = kv.keys[idx].astype(ACC_DTYPE)
    logits = keys @ q.astype(ACC_DTYPE) / math.sqrt(kv.d)
    weights = softmax(logits)
    output = weights @ kv.values[idx].astype(ACC_DTYPE)
    return AttentionOutput(indices=idx, weights=weights, output=output)


def rank_desc(scores, indices=None) -> np.ndarray:
    """Positions of ``scores`` ordered by score descending, then index ascending."""
    scores = np.asarray(scores)
    if indices is None:
        indices = np.arange(scores.shape[0])
    return np.lexsort((indices, -scores.astype(ACC_DTYPE)))


def dense_topk(q, kv: KvStore, k: int) -> np.ndarray:
    """The ``k`` positions with the largest ``q . k_i``, returned in ascending index order."""
    n = kv.total_len
    if not 1 <= k <= n:
        raise ParameterError(f"K={k} outside [1, {n}]")
    q = as_head_vector(q, kv.d)
    scores = kv.keys.astype(ACC_DTYPE) @ q.astype(ACC_DTYPE)
    return np.sort(rank_desc(scores)[:k])
