"""Cosine (spherical) mini-batch k-means with k-means++ seeding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import ACC_DTYPE, DTYPE, DimensionError, ParameterError, l2_normalize, l2_normalize_rows

log = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]

# renormalisation slack allowed when checking objective monotonicity
MONOTONE_TOL = 1e-7


@dataclass
class CentroidSet:
    """``C`` unit-norm centroids of one subspace."""

    subspace_id: int
    centroids: np.ndarray
    duplicated: np.ndarray = None

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=DTYPE)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ParameterError("a centroid set needs at least one centroid")
        if self.duplicated is None:
            self.duplicated = np.zeros(self.centroids.shape[0], dtype=bool)

    @property
    def C(self) -> int:
        return self.centroids.shape[0]

    @property
    def width(self) -> int:
        return self.centroids.shape[1]

    def check_unit(self, tol: float = 1e-5) -> None:
        norms = np.linalg.norm(self.centroids.astype(ACC_DTYPE), axis=1)
        bad = np.abs(norms - 1.0) > tol
        if bad.any():
            raise ValueError(f"subspace {self.subspace_id}: centroids {np.flatnonzero(bad).tolist()} not unit norm")


@dataclass
class ClusterConfig:
    n_centroids: int = 64
    iterations: int = 10
    batch_size: Optional[int] = None  # None -> min(4096, n)
    seed: int = 0
    # queries of all heads in a KV group are clustered together; False demands one index per query head
    pool_heads: bool = True

    def __post_init__(self):
        if self.n_centroids < 1:
            raise ParameterError("n_centroids must be >= 1")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")

    def effective_batch(self, n: int) -> int:
        return min(4096, n) if self.batch_size is None else min(self.batch_size, n)


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p = points.astype(ACC_DTYPE)
    c = centers.astype(ACC_DTYPE)
    d2 = (p * p).sum(1)[:, None] - 2.0 * p @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _sq_dist_to(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points.astype(ACC_DTYPE) - center.astype(ACC_DTYPE)
    return np.einsum("ij,ij->i", diff, diff)


def kmeanspp_seed(points, C: int, seed: SeedLike = 0, subspace_id: int = 0) -> CentroidSet:
    """Draw ``C`` seeds by D^2 weighting and unit-normalize them.

    Zero rows are ignored.  When fewer than ``C`` distinct points exist the
    remaining seeds repeat chosen ones and are flagged in ``duplicated``.
    """
    pts = np.asarray(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ParameterError("k-means++ needs a non-empty 2-D point array")
    if C < 1:
        raise ParameterError("C must be >= 1")
    pts = pts[np.any(pts != 0, axis=1)]
    if pts.shape[0] == 0:
        raise ParameterError("all points are degenerate (zero)")
    rng = _rng(seed)
    n = pts.shape[0]
    chosen = [int(rng.integers(n))]
    duplicated = [False]
    closest = _sq_dist_to(pts, pts[chosen[0]])
    for _ in range(1, C):
        total = closest.sum()
        if total <= 0.0:
            # every point coincides with a chosen seed: cycle through the distinct ones
            distinct = list(dict.fromkeys(chosen))
            chosen.append(distinct[sum(duplicated) % len(distinct)])
            duplicated.append(True)
            continue
        nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        duplicated.append(False)
        closest = np.minimum(closest, _sq_dist_to(pts, pts[nxt]))
    centers, _ = l2_normalize_rows(pts[chosen])
    return CentroidSet(subspace_id, centers, np.array(duplicated))


def assign_nearest(point, centroids: CentroidSet) -> int:
    """Index of the centroid with the largest cosine to ``point`` (lower index on ties)."""
    p = np.asarray(point, dtype=DTYPE)
    if p.shape != (centroids.width,):
        raise DimensionError(f"point of shape {p.shape} vs centroid width {centroids.width}")
    unit, degenerate = l2_normalize(p)
    if degenerate:
        return 0
    return int(np.argmax(centroids.centroids.astype(ACC_DTYPE) @ unit.astype(ACC_DTYPE)))


def assign_all(units: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels and best cosines for unit rows."""
    sims = units.astype(ACC_DTYPE) @ centers.astype(ACC_DTYPE).T
    labels = np.argmax(sims, axis=1)
    return labels, sims[np.arange(sims.shape[0]), labels]


def kmeans_objective(units: np.ndarray, centers: np.ndarray) -> float:
    """Sum over points of the squared distance to the nearest centroid."""
    return float(_sq_dist(units, centers).min(axis=1).sum())


def cosine_kmeans(
    points,
    config: ClusterConfig,
    subspace_id: int = 0,
    history: Optional[list] = None,
    init: Optional[CentroidSet] = None,
) -> CentroidSet:
    """Fit ``config.n_centroids`` unit centroids to the directions of ``points``.

    With a batch covering the whole dataset this is spherical Lloyd: every
    centroid becomes the normalized mean of its members.  Smaller batches
    fold each batch into a per-centroid running mean (Sculley-style counts).
    Empty clusters are moved onto the point farthest from its centroid.

    If ``history`` is a list it receives the objective before the first and
    after every iteration (evaluated on all points).
    """
    pts = np.asarray(points, dtype=DTYPE)
    if pts.ndim != 2:
        raise DimensionError(f"expected 2-D points, got shape {pts.shape}")
    units, degenerate = l2_normalize_rows(pts)
    n_degenerate = int(degenerate.sum())
    if n_degenerate == pts.shape[0]:
        raise ParameterError(f"subspace {subspace_id}: all {pts.shape[0]} points are degenerate")
    if n_degenerate * 2 > pts.shape[0]:
        log.warning("subspace %d: %d of %d query subvectors are zero", subspace_id, n_degenerate, pts.shape[0])
    units = units[~degenerate]
    n = units.shape[0]
    C = config.n_centroids
    rng = np.random.default_rng([config.seed, subspace_id])

    if init is None:
        cs = kmeanspp_seed(units, C, rng, subspace_id)
    else:
        cs = CentroidSet(subspace_id, init.centroids.copy(), init.duplicated.copy())
    centers = cs.centroids.astype(ACC_DTYPE)
    batch = config.effective_batch(n)
    full_batch = batch >= n

    if history is not None:
        history.append(kmeans_objective(units, centers))

    running = centers.copy()
    counts = np.ones(C)
    for _ in range(config.iterations):
        if full_batch:
            sample = units
        else:
            sample = units[np.sort(rng.choice(n, size=batch, replace=False))]
        labels, best = assign_all(sample, centers)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, sample.astype(ACC_DTYPE))
        members = np.bincount(labels, minlength=C).astype(ACC_DTYPE)
        if full_batch:
            target = sums
        else:
            counts += members
            running += (sums - members[:, None] * running) / counts[:, None]
            target = running
        norms = np.linalg.norm(target, axis=1)
        update = (members > 0) & (norms > 0)
        centers[update] = target[update] / norms[update, None]

        empty = np.flatnonzero(members == 0)
        if empty.size:
            # farthest-from-centroid points, largest distance first, lower index on ties
            far = np.lexsort((np.arange(best.shape[0]), best))
            for j, p in zip(empty, far):
                centers[j] = sample[p]
                running[j] = sample[p]
                counts[j] = 1.0
        centers = (centers / np.linalg.norm(centers, axis=1)[:, None])
        if history is not None:
            history.append(kmeans_objective(units, centers))

    out = CentroidSet(subspace_id, centers.astype(DTYPE), cs.duplicated)
    return out
