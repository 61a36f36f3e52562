"""Per-step operation and byte counters for the modeled decode cost."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np


@dataclass
class CostCounters:
    centroid_dot_ops: int = 0  # C*d multiply-adds per search
    lists_gathered: int = 0
    gathered_entries: int = 0  # <= m * tau * L per search
    reduce_ops: int = 0
    candidates: int = 0
    attention_key_ops: int = 0  # K*d
    h2d_bytes_model: int = 0
    searches: int = 0
    inserts_attempted: int = 0
    inserts_applied: int = 0

    SEARCH_FIELDS = ("centroid_dot_ops", "lists_gathered", "gathered_entries", "reduce_ops")

    def __iadd__(self, other: "CostCounters") -> "CostCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def search_side(self) -> tuple[int, ...]:
        return tuple(getattr(self, name) for name in self.SEARCH_FIELDS)

    def modeled_overhead(self) -> int:
        """Search plus append work, the part of a step that the index adds."""
        return self.centroid_dot_ops + self.gathered_entries + self.reduce_ops + self.inserts_attempted

    def as_dict(self) -> dict:
        return asdict(self)


def recall_at_k(selected, truth) -> float:
    """``|selected & truth| / |truth|``."""
    truth = np.unique(np.asarray(truth, dtype=np.int64))
    if truth.size == 0:
        raise ValueError("recall against an empty truth set")
    hits = np.intersect1d(np.asarray(selected, dtype=np.int64), truth).size
    return hits / truth.size
