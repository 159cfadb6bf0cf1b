"""Synthetic labeled-embedding generator and minority-mass retention study.

The generator plants clusters of near-duplicate groups on the unit sphere:
each group contributes ``count`` base points around its cluster center
(center + Gaussian noise, renormalized) and every base point is emitted
``duplicate_multiplicity`` times with jitter one tenth of the cluster's
angular noise.  The study harness clusters the data, calibrates both
dedup heuristics to the same keep fraction, and compares how much mass
the kept set allocates to minority (non-modal) labels, with a paired
t-test across trial seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import dedup, partition, seeds
from .embedstore import EmbeddingMatrix
from .errors import ConfigError
from .fairmetrics import LabeledTable, Record
from .prototypes import ConceptPrototypeSet

GROUP_ATTRIBUTE = "group"
_STUDY_HEURISTICS = ("semdedup", "fairdedup")

# Cluster count used with the shipped duplicate-skewed spec (wedge split of
# its single shared-center blob).
DUPLICATE_SKEWED_K = 6


@dataclass(frozen=True)
class GroupSpec:
    label: str
    count: int
    duplicate_multiplicity: int = 1

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"group {self.label!r}: count must be >= 0")
        if self.duplicate_multiplicity < 1:
            raise ConfigError(
                f"group {self.label!r}: duplicate_multiplicity must be >= 1"
            )


@dataclass(frozen=True)
class ClusterSpec:
    center_seed: int
    angular_noise: float
    groups: tuple[GroupSpec, ...]

    def __post_init__(self):
        if self.angular_noise < 0:
            raise ConfigError("angular_noise must be >= 0")
        if not self.groups:
            raise ConfigError("cluster has no groups")


@dataclass(frozen=True)
class SynthSpec:
    clusters: tuple[ClusterSpec, ...]
    d: int
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError(f"dimension must be >= 2, got {self.d}")
        if not self.clusters:
            raise ConfigError("spec needs at least one cluster")

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        clusters = tuple(
            ClusterSpec(
                center_seed=int(c["center_seed"]),
                angular_noise=float(c["angular_noise"]),
                groups=tuple(
                    GroupSpec(
                        label=str(g["label"]),
                        count=int(g["count"]),
                        duplicate_multiplicity=int(g.get("duplicate_multiplicity", 1)),
                    )
                    for g in c["groups"]
                ),
            )
            for c in data["clusters"]
        )
        return cls(clusters=clusters, d=int(data["d"]), seed=int(data.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "seed": self.seed,
            "clusters": [
                {
                    "center_seed": c.center_seed,
                    "angular_noise": c.angular_noise,
                    "groups": [
                        {
                            "label": g.label,
                            "count": g.count,
                            "duplicate_multiplicity": g.duplicate_multiplicity,
                        }
                        for g in c.groups
                    ],
                }
                for c in self.clusters
            ],
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def label_counts(self) -> dict[str, int]:
        """Rows contributed per label (count x multiplicity, summed)."""
        counts: dict[str, int] = {}
        for cluster in self.clusters:
            for group in cluster.groups:
                counts[group.label] = counts.get(group.label, 0) + (
                    group.count * group.duplicate_multiplicity
                )
        return counts


def duplicate_skewed_spec() -> SynthSpec:
    """Shipped study spec: heavily duplicated tight minority inside a spread majority.

    The minority sits closer to the shared center and carries 4x duplication,
    so max-distance selection shadows it while concept-balanced selection
    recovers it.  Cluster with k = 6 wedges for the default study.
    """
    data = json.loads(
        resources.files("fairdedup.data")
        .joinpath("duplicate_skewed_spec.json")
        .read_text()
    )
    return SynthSpec.from_dict(data)


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def cluster_center(center_seed: int, d: int) -> np.ndarray:
    """Unit direction pinned by center_seed alone (stable across trial seeds)."""
    rng = seeds.generator(center_seed, seeds.STREAM_CENTER)
    return _unit(rng.standard_normal(d))


def generate(spec: SynthSpec) -> tuple[EmbeddingMatrix, LabeledTable]:
    """Materialize the spec; deterministic in spec.seed."""
    rows: list[np.ndarray] = []
    ids: list[str] = []
    records: list[Record] = []
    for ci, cluster in enumerate(spec.clusters):
        center = cluster_center(cluster.center_seed, spec.d)
        rng = seeds.generator(spec.seed, seeds.STREAM_SYNTH, ci)
        sigma = cluster.angular_noise
        for gi, group in enumerate(cluster.groups):
            for b in range(group.count):
                base = _unit(center + sigma * rng.standard_normal(spec.d))
                for r in range(group.duplicate_multiplicity):
                    point = _unit(base + (sigma / 10.0) * rng.standard_normal(spec.d))
                    sample_id = f"c{ci}:g{gi}:b{b}:r{r}"
                    rows.append(point)
                    ids.append(sample_id)
                    records.append(
                        Record(
                            id=sample_id,
                            cls=None,
                            predicted=None,
                            labels={GROUP_ATTRIBUTE: group.label},
                        )
                    )
    matrix = EmbeddingMatrix.create(
        ids, np.vstack(rows).astype(np.float32) if rows else np.empty((0, spec.d))
    )
    table = LabeledTable(attributes=(GROUP_ATTRIBUTE,), records=tuple(records))
    return matrix, table


def oracle_prototypes(
    matrix: EmbeddingMatrix, table: LabeledTable, attribute: str = GROUP_ATTRIBUTE
) -> ConceptPrototypeSet:
    """Group-center prototypes: normalized mean embedding per label."""
    labels = [r.labels[attribute] for r in table.records]
    names = sorted(set(labels))
    vectors = np.empty((len(names), matrix.d), dtype=np.float32)
    rows = matrix.rows.astype(np.float64)
    for i, name in enumerate(names):
        mask = np.asarray([lab == name for lab in labels])
        vectors[i] = _unit(rows[mask].mean(axis=0)).astype(np.float32)
    return ConceptPrototypeSet(names=tuple(names), vectors=vectors)


def minority_labels(table: LabeledTable, attribute: str = GROUP_ATTRIBUTE) -> list[str]:
    """All non-modal labels of the attribute (ties broken toward fewer minorities)."""
    counts: dict[str, int] = {}
    for r in table.records:
        counts[r.labels[attribute]] = counts.get(r.labels[attribute], 0) + 1
    modal = max(sorted(counts), key=lambda label: counts[label])
    return sorted(label for label in counts if label != modal)


def label_mass(
    table: LabeledTable, labels: set[str], indices=None, attribute: str = GROUP_ATTRIBUTE
) -> float:
    """Fraction of (optionally index-restricted) records carrying the labels."""
    records = (
        table.records
        if indices is None
        else [table.records[i] for i in indices]
    )
    if not records:
        raise ConfigError("cannot compute label mass over zero records")
    hits = sum(1 for r in records if r.labels[attribute] in labels)
    return hits / len(records)


def paired_t(differences) -> tuple[float | None, float | None, bool]:
    """Two-sided paired t-test: t = mean * sqrt(n) / std(ddof=1).

    Returns (t, p, exact_tie); exact_tie flags zero variance, where the
    statistic is undefined.
    """
    diffs = np.asarray(differences, dtype=np.float64)
    if diffs.size < 2:
        raise ConfigError("paired t-test needs at least 2 trials")
    std = float(diffs.std(ddof=1))
    if std == 0.0:
        return None, None, True
    t = float(diffs.mean() * np.sqrt(diffs.size) / std)
    p = float(2.0 * stats.t.sf(abs(t), df=diffs.size - 1))
    return t, p, False


@dataclass
class RetentionReport:
    minority: tuple[str, ...]
    target_keep: float
    trials: list[dict] = field(default_factory=list)
    means: dict[str, float] = field(default_factory=dict)
    t_stat: float | None = None
    p_value: float | None = None
    exact_tie: bool = False

    def to_dict(self) -> dict:
        return {
            "minority_labels": list(self.minority),
            "target_keep": self.target_keep,
            "trials": self.trials,
            "means": self.means,
            "paired_t": {
                "statistic": self.t_stat,
                "p_value": self.p_value,
                "exact_tie": self.exact_tie,
                "comparison": "fairdedup - semdedup",
            },
        }

    def format_table(self) -> str:
        """Plain-text summary: minority mass per data setting."""
        header = f"{'':14s}{'Full Data':>12s}{'SemDeDup':>12s}{'FairDeDup':>12s}"
        row = (
            f"{'minority mass':14s}"
            f"{self.means['full'] * 100:11.2f}%"
            f"{self.means['semdedup'] * 100:11.2f}%"
            f"{self.means['fairdedup'] * 100:11.2f}%"
        )
        if self.exact_tie:
            sig = "paired t-test: exact tie across trials"
        else:
            sig = f"paired t-test (FDD-SDD): t={self.t_stat:.3f}, p={self.p_value:.2e}"
        return "\n".join(
            [header, row, f"trials: {len(self.trials)}", sig]
        )


def run_trial(
    spec: SynthSpec,
    trial: int,
    target_keep: float,
    calibration_tol: float,
    k: int | None,
    minority: set[str],
    workers: int = 1,
) -> dict:
    """One seeded generate -> cluster -> dedup-per-heuristic -> mass measurement."""
    trial_seed = int(
        seeds.spawn(spec.seed, seeds.STREAM_TRIAL, trial).generate_state(1)[0]
    )
    trial_spec = replace(spec, seed=trial_seed)
    matrix, table = generate(trial_spec)
    k = k if k is not None else len(spec.clusters)
    assignment = partition.kmeans(
        matrix, partition.KMeansConfig(k=k, seed=trial_seed)
    )
    protos = oracle_prototypes(matrix, table)

    result = {"trial": trial, "seed": trial_seed, "full": label_mass(table, minority)}
    for heuristic in _STUDY_HEURISTICS:
        cfg = dedup.DedupConfig(heuristic=heuristic, seed=trial_seed)
        calibration = dedup.calibrate_epsilon(
            matrix,
            assignment,
            protos,
            cfg,
            target_keep=target_keep,
            tol=calibration_tol,
            workers=workers,
        )
        keep_list = dedup.dedup_dataset(
            matrix,
            assignment,
            protos,
            replace(cfg, epsilon=calibration.epsilon),
            workers=workers,
        )
        result[heuristic] = label_mass(table, minority, indices=keep_list.kept)
        result[f"{heuristic}_epsilon"] = calibration.epsilon
        result[f"{heuristic}_keep_fraction"] = keep_list.keep_fraction
    return result


def retention_study(
    spec: SynthSpec,
    n_trials: int,
    target_keep: float = 0.5,
    calibration_tol: float = 0.005,
    k: int | None = None,
    minority: list[str] | None = None,
    workers: int = 1,
) -> RetentionReport:
    """Run the minority-mass comparison across n_trials seeds."""
    if n_trials < 2:
        raise ConfigError("retention study needs at least 2 trials for statistics")
    if minority is None:
        _, table = generate(spec)
        minority = minority_labels(table)
    minority_set = set(minority)

    report = RetentionReport(minority=tuple(sorted(minority_set)), target_keep=target_keep)
    for trial in range(n_trials):
        report.trials.append(
            run_trial(
                spec, trial, target_keep, calibration_tol, k, minority_set, workers
            )
        )

    for key in ("full", *_STUDY_HEURISTICS):
        report.means[key] = float(
            np.mean([trial[key] for trial in report.trials])
        )
    diffs = [trial["fairdedup"] - trial["semdedup"] for trial in report.trials]
    report.t_stat, report.p_value, report.exact_tie = paired_t(diffs)
    return report
