"""Per-cluster duplicate detection and keep selection.

Three heuristics decide which sample of a duplicate neighborhood survives:

* ``semdedup``   -- sort a cluster by distance to its centroid (most distant
  first) and keep a row iff its max similarity to any earlier row is at most
  1 - epsilon.
* ``fairdedup``  -- walk duplicate neighborhoods and keep the member that
  best represents the currently least-represented sensitive concept,
  tracked by a per-cluster running average of kept samples' prototype
  similarities.  The first neighborhood in a cluster keeps the member with
  the highest mean similarity across all concepts.
* ``random``     -- same neighborhood walk, uniform random member kept.

Two samples are duplicates when their cosine similarity strictly exceeds
1 - epsilon.  Note the two keep-set definitions differ by design: semdedup
uses the triangular max predicate, while fairdedup/random use the
one-keep-per-neighborhood walk, so their keep sets need not coincide even
at equal epsilon.

Clusters are processed independently (no shared state), so any number of
workers produces identical output.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import seeds
from .embedstore import EmbeddingMatrix
from .errors import ConfigError, DimensionError, ValidationError
from .partition import ClusterAssignment, cluster_members
from .prototypes import ConceptPrototypeSet

HEURISTICS = ("semdedup", "fairdedup", "random")
VISIT_ORDERS = ("random", "sequential")


@dataclass(frozen=True)
class DedupConfig:
    epsilon: float = 0.1
    heuristic: str = "semdedup"
    seed: int = 0
    target_keep_fraction: float | None = None
    visit_order: str = "random"
    block_size: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.heuristic not in HEURISTICS:
            raise ConfigError(
                f"heuristic must be one of {HEURISTICS}, got {self.heuristic!r}"
            )
        if self.target_keep_fraction is not None and not (
            0.0 < self.target_keep_fraction <= 1.0
        ):
            raise ConfigError(
                f"target_keep_fraction must be in (0, 1], got {self.target_keep_fraction}"
            )
        if self.visit_order not in VISIT_ORDERS:
            raise ConfigError(
                f"visit_order must be one of {VISIT_ORDERS}, got {self.visit_order!r}"
            )
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")


@dataclass
class BalanceState:
    """Running mean of kept samples' similarities to each concept prototype."""

    sums: np.ndarray  # float64, length m
    count: int = 0

    @classmethod
    def new(cls, m: int) -> "BalanceState":
        return cls(sums=np.zeros(m, dtype=np.float64), count=0)

    def update(self, sim_row: np.ndarray) -> None:
        self.sums += sim_row
        self.count += 1

    def means(self) -> np.ndarray:
        if self.count == 0:
            raise ValidationError("balance means are undefined before any keep")
        return self.sums / self.count

    def least_represented(self) -> int:
        """Concept index with the lowest running mean (ties to lowest index)."""
        return int(np.argmin(self.means()))


@dataclass(frozen=True)
class KeepDecision:
    cluster: int
    neighborhood: int
    heuristic: str


@dataclass
class KeepList:
    """Keep/prune decisions over global row indices, with provenance for keeps."""

    n_total: int
    kept: tuple[int, ...]  # ascending
    provenance: dict[int, KeepDecision]

    @property
    def keep_fraction(self) -> float:
        if self.n_total == 0:
            raise ValidationError("keep fraction undefined for empty dataset")
        return len(self.kept) / self.n_total


def neighborhood(
    cluster_embs: EmbeddingMatrix, anchor: int, epsilon: float
) -> np.ndarray:
    """Local indices with similarity to ``anchor`` above 1 - epsilon, plus anchor."""
    if anchor < 0 or anchor >= cluster_embs.n:
        raise IndexError(f"anchor {anchor} out of range for cluster of {cluster_embs.n}")
    rows = cluster_embs.rows.astype(np.float64)
    return _neighborhood(rows, anchor, epsilon)


def _neighborhood(rows: np.ndarray, anchor: int, epsilon: float) -> np.ndarray:
    sims = rows @ rows[anchor]
    mask = sims > 1.0 - epsilon
    mask[anchor] = True
    return np.flatnonzero(mask)


def semdedup_filter(
    cluster_embs: EmbeddingMatrix,
    centroid: np.ndarray,
    epsilon: float,
    block_size: int = 1024,
) -> np.ndarray:
    """Max-distance keep filter; returns kept local indices (ascending)."""
    centroid = np.asarray(centroid, dtype=np.float64).reshape(-1)
    if centroid.shape[0] != cluster_embs.d:
        raise DimensionError(
            f"centroid has d={centroid.shape[0]}, cluster has d={cluster_embs.d}"
        )
    rows = cluster_embs.rows.astype(np.float64)
    return _semdedup(rows, centroid, epsilon, block_size)


def _semdedup(
    rows: np.ndarray, centroid: np.ndarray, epsilon: float, block_size: int
) -> np.ndarray:
    q = rows.shape[0]
    if q == 0:
        return np.empty(0, dtype=np.intp)
    # Ascending similarity to centroid == descending distance; stable so ties
    # preserve original order.
    order = np.argsort(rows @ centroid, kind="stable")
    ordered = rows[order]
    keep = np.ones(q, dtype=bool)
    threshold = 1.0 - epsilon
    # Blocked so pairwise similarity memory stays O(block_size * q).
    for start in range(0, q, block_size):
        end = min(start + block_size, q)
        sims = ordered[start:end] @ ordered[:end].T
        for r in range(end - start):
            i = start + r
            if i and sims[r, :i].max() > threshold:
                keep[i] = False
    return np.sort(order[keep])


def _visit_sequence(q: int, rng: np.random.Generator, visit_order: str) -> np.ndarray:
    if visit_order == "sequential":
        return np.arange(q, dtype=np.intp)
    return rng.permutation(q)


def _walk(
    rows: np.ndarray, epsilon: float, order: np.ndarray
) -> Iterator[np.ndarray]:
    """Yield each visited neighborhood (unvisited members only, ascending)."""
    q = rows.shape[0]
    visited = np.zeros(q, dtype=bool)
    threshold = 1.0 - epsilon
    for anchor in order:
        if visited[anchor]:
            continue
        sims = rows @ rows[anchor]
        mask = (sims > threshold) & ~visited
        mask[anchor] = True
        members = np.flatnonzero(mask)
        visited[members] = True
        yield members


def fairdedup_select(
    cluster_embs: EmbeddingMatrix,
    proto_sims: np.ndarray,
    epsilon: float,
    seed,
    visit_order: str = "random",
    return_state: bool = False,
):
    """Concept-balanced keep selection.

    ``proto_sims`` is the cluster's q x m matrix of prototype similarities.
    The visit permutation is the first draw from the seeded generator, so a
    reference walk can reproduce it from the same seed.  Returns kept local
    indices in visit order (and the final BalanceState when requested).
    """
    proto_sims = np.asarray(proto_sims, dtype=np.float64)
    if proto_sims.ndim != 2 or proto_sims.shape[1] == 0:
        raise ConfigError("fairdedup requires at least one concept prototype")
    if proto_sims.shape[0] != cluster_embs.n:
        raise ValidationError(
            f"proto_sims has {proto_sims.shape[0]} rows for cluster of {cluster_embs.n}"
        )
    rows = cluster_embs.rows.astype(np.float64)
    kept, state = _fairdedup(rows, proto_sims, epsilon, seed, visit_order)
    if return_state:
        return kept, state
    return kept


def _fairdedup(
    rows: np.ndarray,
    proto_sims: np.ndarray,
    epsilon: float,
    seed,
    visit_order: str,
) -> tuple[np.ndarray, BalanceState]:
    rng = np.random.default_rng(seed)
    order = _visit_sequence(rows.shape[0], rng, visit_order)
    balance = BalanceState.new(proto_sims.shape[1])
    kept: list[int] = []
    for members in _walk(rows, epsilon, order):
        if balance.count == 0:
            scores = proto_sims[members].mean(axis=1)
        else:
            scores = proto_sims[members, balance.least_represented()]
        pick = int(members[np.argmax(scores)])
        balance.update(proto_sims[pick])
        kept.append(pick)
    return np.asarray(kept, dtype=np.intp), balance


def random_select(
    cluster_embs: EmbeddingMatrix,
    epsilon: float,
    seed,
    visit_order: str = "random",
) -> np.ndarray:
    """Neighborhood walk keeping a uniformly random member each time."""
    rows = cluster_embs.rows.astype(np.float64)
    return _random_select(rows, epsilon, seed, visit_order)


def _random_select(
    rows: np.ndarray, epsilon: float, seed, visit_order: str
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    order = _visit_sequence(rows.shape[0], rng, visit_order)
    kept = [
        int(members[rng.integers(len(members))])
        for members in _walk(rows, epsilon, order)
    ]
    return np.asarray(kept, dtype=np.intp)


def _dedup_cluster(
    matrix: EmbeddingMatrix,
    assignment: ClusterAssignment,
    protos: ConceptPrototypeSet | None,
    cfg: DedupConfig,
    cluster_id: int,
) -> list[tuple[int, int]]:
    """(global index, neighborhood ordinal) for keeps in one cluster."""
    members = cluster_members(assignment, cluster_id)
    if members.size == 0:
        return []
    rows = matrix.rows[members].astype(np.float64)
    cluster_seed = seeds.spawn(cfg.seed, seeds.STREAM_DEDUP, cluster_id)
    if cfg.heuristic == "semdedup":
        centroid = assignment.centroids[cluster_id].astype(np.float64)
        kept_local = _semdedup(rows, centroid, cfg.epsilon, cfg.block_size)
    elif cfg.heuristic == "fairdedup":
        proto_sims = rows @ protos.vectors.astype(np.float64).T
        kept_local, _ = _fairdedup(
            rows, proto_sims, cfg.epsilon, cluster_seed, cfg.visit_order
        )
    else:
        kept_local = _random_select(rows, cfg.epsilon, cluster_seed, cfg.visit_order)
    return [(int(members[local]), ordinal) for ordinal, local in enumerate(kept_local)]


def dedup_dataset(
    matrix: EmbeddingMatrix,
    assignment: ClusterAssignment,
    protos: ConceptPrototypeSet | None,
    cfg: DedupConfig,
    workers: int = 1,
) -> KeepList:
    """Apply the configured heuristic independently to every cluster."""
    if cfg.heuristic == "fairdedup" and protos is None:
        raise ConfigError("fairdedup requires concept prototypes")
    if protos is not None and protos.d != matrix.d:
        raise DimensionError(
            f"prototypes have d={protos.d}, embeddings have d={matrix.d}"
        )
    if assignment.n != matrix.n:
        raise ValidationError(
            f"assignment covers {assignment.n} samples, matrix has {matrix.n}"
        )
    if protos is not None and protos.m == 0:
        raise ConfigError("prototype set is empty")

    cluster_ids = range(assignment.k)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_cluster = list(
                pool.map(
                    lambda cid: _dedup_cluster(matrix, assignment, protos, cfg, cid),
                    cluster_ids,
                )
            )
    else:
        per_cluster = [
            _dedup_cluster(matrix, assignment, protos, cfg, cid)
            for cid in cluster_ids
        ]

    provenance: dict[int, KeepDecision] = {}
    for cid, keeps in zip(cluster_ids, per_cluster):
        for global_idx, ordinal in keeps:
            provenance[global_idx] = KeepDecision(
                cluster=cid, neighborhood=ordinal, heuristic=cfg.heuristic
            )
    return KeepList(
        n_total=matrix.n,
        kept=tuple(sorted(provenance)),
        provenance=provenance,
    )


@dataclass(frozen=True)
class CalibrationResult:
    epsilon: float
    realized_keep_fraction: float
    attained: bool
    evaluations: tuple[tuple[float, float], ...]  # (epsilon, keep fraction)


def calibrate_epsilon(
    matrix: EmbeddingMatrix,
    assignment: ClusterAssignment,
    protos: ConceptPrototypeSet | None,
    cfg: DedupConfig,
    target_keep: float,
    tol: float,
    workers: int = 1,
    max_rounds: int = 40,
) -> CalibrationResult:
    """Bisect epsilon in [0, 1] until the realized keep fraction hits target_keep.

    The keep fraction is a non-increasing staircase in epsilon; when the
    staircase jumps over the target, the closest evaluated epsilon is
    returned with ``attained`` False.
    """
    if tol <= 0:
        raise ConfigError(f"tol must be > 0, got {tol}")
    if not 0.0 < target_keep <= 1.0:
        raise ConfigError(f"target_keep must be in (0, 1], got {target_keep}")
    if matrix.n == 0:
        raise ConfigError("cannot calibrate on an empty dataset")

    evals: list[tuple[float, float]] = []

    def realized(eps: float) -> float:
        frac = dedup_dataset(
            matrix, assignment, protos, replace(cfg, epsilon=eps), workers=workers
        ).keep_fraction
        evals.append((eps, frac))
        return frac

    def result(eps: float, frac: float, attained: bool) -> CalibrationResult:
        return CalibrationResult(
            epsilon=eps,
            realized_keep_fraction=frac,
            attained=attained,
            evaluations=tuple(evals),
        )

    lo, hi = 0.0, 1.0
    f_lo = realized(lo)
    if abs(f_lo - target_keep) <= tol:
        return result(lo, f_lo, True)
    f_hi = realized(hi)
    if abs(f_hi - target_keep) <= tol:
        return result(hi, f_hi, True)
    if f_hi > target_keep:
        # Even maximal pruning keeps too much; hi is the best achievable.
        return result(hi, f_hi, False)

    best_eps, best_frac = min(evals, key=lambda e: abs(e[1] - target_keep))
    for _ in range(max_rounds):
        mid = 0.5 * (lo + hi)
        f_mid = realized(mid)
        if abs(f_mid - target_keep) < abs(best_frac - target_keep):
            best_eps, best_frac = mid, f_mid
        if abs(f_mid - target_keep) <= tol:
            return result(mid, f_mid, True)
        if f_mid > target_keep:
            lo = mid
        else:
            hi = mid
    return result(best_eps, best_frac, False)


def write_keeplist(path, ids: Sequence[str], keep_list: KeepList) -> None:
    """One JSON record per sample: id, kept flag, cluster, neighborhood, heuristic."""
    if len(ids) != keep_list.n_total:
        raise ValidationError("id count does not match keep list size")
    kept = set(keep_list.kept)
    with open(path, "w", encoding="utf-8") as fh:
        for idx, sample_id in enumerate(ids):
            decision = keep_list.provenance.get(idx)
            fh.write(
                json.dumps(
                    {
                        "id": sample_id,
                        "kept": idx in kept,
                        "cluster": decision.cluster if decision else None,
                        "neighborhood": decision.neighborhood if decision else None,
                        "heuristic": decision.heuristic if decision else None,
                    }
                )
                + "\n"
            )


def read_keeplist(path) -> tuple[list[str], KeepList]:
    """Ids in file order plus the reconstructed KeepList."""
    ids: list[str] = []
    provenance: dict[int, KeepDecision] = {}
    kept: list[int] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        idx = len(ids)
        ids.append(str(record["id"]))
        if record["kept"]:
            kept.append(idx)
            provenance[idx] = KeepDecision(
                cluster=record["cluster"],
                neighborhood=record["neighborhood"],
                heuristic=record["heuristic"],
            )
    return ids, KeepList(n_total=len(ids), kept=tuple(kept), provenance=provenance)
