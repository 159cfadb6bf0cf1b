"""Spherical k-means partitioning.

Duplicate detection only compares samples within a cluster, turning the
O(n^2) pairwise-similarity problem into O(n^2 / k).  The objective matches
the dedup criterion: maximize cosine similarity to the assigned centroid
(inertia = sum of 1 - similarity), with centroids as renormalized means.

Determinism contract: identical (matrix, config) produce identical
assignments and centroids; ties in assignment go to the lowest cluster
index, and per-cluster accumulation runs in fixed sample order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeds
from .embedstore import EmbeddingMatrix, normalize_rows
from .errors import ConfigError, ValidationError

INIT_METHODS = ("kmeanspp", "random")

_ASSIGN_BLOCK = 8192  # rows per similarity block in the assignment step


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0
    init: str = "kmeanspp"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.init not in INIT_METHODS:
            raise ConfigError(f"init must be one of {INIT_METHODS}, got {self.init!r}")


@dataclass
class ClusterAssignment:
    """Per-sample cluster ids plus the unit-norm centroids that produced them."""

    assignments: np.ndarray  # int64, length n
    centroids: np.ndarray  # k x d float32, unit rows
    inertia: float | None = None
    inertia_history: tuple[float, ...] = field(default_factory=tuple)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n(self) -> int:
        return self.assignments.shape[0]

    def empty_clusters(self) -> list[int]:
        counts = np.bincount(self.assignments, minlength=self.k)
        return [int(c) for c in np.flatnonzero(counts == 0)]


def _init_centroids(
    rows: np.ndarray, k: int, rng: np.random.Generator, method: str
) -> np.ndarray:
    n = rows.shape[0]
    if method == "random":
        chosen = rng.choice(n, size=k, replace=False)
        return rows[chosen].copy()
    # k-means++ with cosine distance (1 - similarity) as the seeding weight.
    chosen = [int(rng.integers(n))]
    best_sim = rows @ rows[chosen[0]]
    for _ in range(1, k):
        weights = np.clip(1.0 - best_sim, 0.0, None)
        total = float(weights.sum())
        if total <= 0.0:
            # Remaining points duplicate chosen centroids; any pick works.
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
        best_sim = np.maximum(best_sim, rows @ rows[nxt])
    return rows[chosen].copy()


def _assign(rows: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    """Argmax-similarity assignment (ties to lowest index) and total inertia."""
    n = rows.shape[0]
    assignments = np.empty(n, dtype=np.int64)
    inertia = 0.0
    for start in range(0, n, _ASSIGN_BLOCK):
        end = min(start + _ASSIGN_BLOCK, n)
        sims = rows[start:end] @ centroids.T
        local = np.argmax(sims, axis=1)
        assignments[start:end] = local
        inertia += float(np.sum(1.0 - sims[np.arange(end - start), local]))
    return assignments, inertia


def kmeans(matrix: EmbeddingMatrix, cfg: KMeansConfig) -> ClusterAssignment:
    """Lloyd iterations of spherical k-means, deterministic under cfg.seed."""
    n = matrix.n
    if n < 1:
        raise ConfigError("cannot cluster an empty matrix")
    if cfg.k > n:
        raise ConfigError(f"k={cfg.k} exceeds sample count n={n}")
    if not np.all(np.isfinite(matrix.rows)):
        raise ValidationError("embedding matrix contains non-finite values")

    rows = matrix.rows.astype(np.float64)
    rng = seeds.generator(cfg.seed, seeds.STREAM_CLUSTER)
    centroids = _init_centroids(rows, cfg.k, rng, cfg.init)

    history: list[float] = []
    assignments = None
    prev_assignments = None
    prev_inertia = None
    for _ in range(cfg.max_iters):
        assignments, inertia = _assign(rows, centroids)
        history.append(inertia)
        if prev_inertia is not None:
            improved = prev_inertia - inertia
            if improved <= cfg.tol * abs(prev_inertia):
                break
            if np.array_equal(assignments, prev_assignments):
                break
        prev_inertia = inertia
        prev_assignments = assignments

        # Update step: fixed-order accumulation per cluster, renormalized mean.
        sums = np.zeros((cfg.k, rows.shape[1]))
        np.add.at(sums, assignments, rows)
        norms = np.linalg.norm(sums, axis=1)
        live = norms > 1e-12
        centroids = centroids.copy()
        centroids[live] = sums[live] / norms[live, None]

    return ClusterAssignment(
        assignments=assignments,
        centroids=normalize_rows(centroids.astype(np.float32)),
        inertia=history[-1],
        inertia_history=tuple(history),
    )


def cluster_members(assignment: ClusterAssignment, cluster_id: int) -> np.ndarray:
    """Row indices assigned to ``cluster_id``, ascending."""
    if cluster_id < 0 or cluster_id >= assignment.k:
        raise IndexError(f"cluster id {cluster_id} out of range for k={assignment.k}")
    return np.flatnonzero(assignment.assignments == cluster_id)


def write_assignment(path, ids, assignment: ClusterAssignment) -> None:
    """One JSON record per sample: {"id": ..., "cluster": ...}."""
    if len(ids) != assignment.n:
        raise ValidationError("id count does not match assignment length")
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, cluster in zip(ids, assignment.assignments):
            fh.write(
                json.dumps({"id": sample_id, "cluster": int(cluster)}) + "\n"
            )


def read_assignment(path) -> tuple[list[str], np.ndarray]:
    """Ids and cluster ids in file order."""
    ids: list[str] = []
    clusters: list[int] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        ids.append(str(record["id"]))
        clusters.append(int(record["cluster"]))
    return ids, np.asarray(clusters, dtype=np.int64)


def assignment_for_matrix(
    matrix: EmbeddingMatrix,
    ids: list[str],
    clusters: np.ndarray,
    centroids: np.ndarray,
) -> ClusterAssignment:
    """Align a loaded assignment with a matrix's row order by sample id."""
    position = {sample_id: i for i, sample_id in enumerate(ids)}
    missing = [s for s in matrix.ids if s not in position]
    if missing:
        raise ValidationError(
            f"assignment is missing {len(missing)} ids (first: {missing[0]!r})"
        )
    order = np.asarray([position[s] for s in matrix.ids], dtype=np.intp)
    aligned = clusters[order]
    if aligned.size and (aligned.min() < 0 or aligned.max() >= centroids.shape[0]):
        raise ValidationError("cluster id out of range for centroid count")
    return ClusterAssignment(assignments=aligned, centroids=centroids)
