"""Fairness audit metrics.

Two families:

* subgroup recall disparity over labeled classification tables
  (disparity = recall(subgroup 1) - recall(subgroup 2); zero means
  equality of opportunity), aggregated as Mean/Max/Gap over classes where
  Mean and Max are taken over absolute per-class disparities and
  Gap = Max - Mean;
* ranking skew over retrieval results: Skew@k is the log ratio of a
  subgroup's smoothed share of the top-k to its desired share, MaxSkew and
  |MinSkew| are the extremes over subgroup values, and NDKL is the
  log2-discounted, normalized sum over prefix depths of the KL divergence
  (natural log) between the prefix's subgroup distribution and the desired
  one.

Both actual and desired distributions receive additive smoothing
(delta added to every value's proportion, then renormalized) so the log
ratios stay defined when a value is absent from a prefix.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .embedstore import EmbeddingMatrix
from .errors import (
    ConfigError,
    EmptyReportError,
    InsufficientSupportError,
    ValidationError,
    VocabularyError,
)

DEFAULT_SMOOTHING = 1e-6
DEFAULT_MIN_SUPPORT = 25


@dataclass(frozen=True)
class Record:
    id: str
    cls: str | None
    predicted: str | None
    labels: Mapping[str, str]


@dataclass
class LabeledTable:
    """Per-sample true class, predicted class and subgroup labels."""

    attributes: tuple[str, ...]
    records: tuple[Record, ...]

    def classes(self) -> list[str]:
        return sorted({r.cls for r in self.records if r.cls is not None})

    def label_map(self, attribute: str) -> dict[str, str]:
        if attribute not in self.attributes:
            raise VocabularyError(f"unknown attribute {attribute!r}")
        return {r.id: r.labels[attribute] for r in self.records}

    @classmethod
    def from_csv(cls, path) -> "LabeledTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError(f"{path}: empty label table") from None
            if header[:3] != ["id", "class", "predicted"]:
                raise ValidationError(
                    f"{path}: header must start with id,class,predicted"
                )
            attributes = tuple(header[3:])
            records = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise ValidationError(f"{path}: ragged row {row!r}")
                records.append(
                    Record(
                        id=row[0],
                        cls=row[1] or None,
                        predicted=row[2] or None,
                        labels=dict(zip(attributes, row[3:])),
                    )
                )
        return cls(attributes=attributes, records=tuple(records))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "class", "predicted", *self.attributes])
            for r in self.records:
                writer.writerow(
                    [r.id, r.cls or "", r.predicted or ""]
                    + [r.labels[a] for a in self.attributes]
                )


@dataclass(frozen=True)
class RankedRetrieval:
    query: str
    ranking: tuple[str, ...]  # descending score
    k: int

    def __post_init__(self):
        if len(set(self.ranking)) != len(self.ranking):
            raise ValidationError("ranking contains duplicate ids")
        if not 1 <= self.k <= len(self.ranking):
            raise ValidationError(
                f"k={self.k} out of range for ranking of {len(self.ranking)}"
            )


@dataclass(frozen=True)
class DesiredDistribution:
    attribute: str
    proportions: Mapping[str, float]  # value -> desired share, ordered

    def __post_init__(self):
        values = np.asarray(list(self.proportions.values()), dtype=np.float64)
        if values.size == 0:
            raise ValidationError("desired distribution has no values")
        if (values < 0).any():
            raise ValidationError("desired proportions must be non-negative")
        if abs(values.sum() - 1.0) > 1e-9:
            raise ValidationError(
                f"desired proportions sum to {values.sum()}, expected 1"
            )

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(self.proportions)

    @classmethod
    def from_json(cls, path) -> "DesiredDistribution":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(attribute=data["attribute"], proportions=dict(data["proportions"]))

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {"attribute": self.attribute, "proportions": dict(self.proportions)},
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


def corpus_distribution(table: LabeledTable, attribute: str) -> DesiredDistribution:
    """Empirical attribute distribution of the table (the default desired one)."""
    labels = [r.labels[attribute] for r in table.records]
    if not labels:
        raise ValidationError("cannot derive a distribution from an empty table")
    if attribute not in table.attributes:
        raise VocabularyError(f"unknown attribute {attribute!r}")
    values, counts = np.unique(np.asarray(labels, dtype=object), return_counts=True)
    total = counts.sum()
    return DesiredDistribution(
        attribute=attribute,
        proportions={str(v): float(c) / total for v, c in zip(values, counts)},
    )


@dataclass(frozen=True)
class DisparityReport:
    attribute: str
    subgroup_1: str
    subgroup_2: str
    per_class: Mapping[str, float]  # signed disparities
    mean_abs: float
    max_abs: float
    gap: float
    excluded: Mapping[str, str]  # class -> reason
    min_support: int

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "subgroups": [self.subgroup_1, self.subgroup_2],
            "per_class": dict(self.per_class),
            "mean": self.mean_abs,
            "max": self.max_abs,
            "gap": self.gap,
            "excluded": dict(self.excluded),
            "min_support": self.min_support,
        }


def subgroup_recall(
    table: LabeledTable, cls: str, attribute: str, value: str
) -> float:
    """Recall of class ``cls`` restricted to records labeled ``value``."""
    total = 0
    hits = 0
    for r in table.records:
        if r.cls == cls and r.labels.get(attribute) == value:
            total += 1
            if r.predicted == cls:
                hits += 1
    if total == 0:
        raise InsufficientSupportError(
            f"no records of class {cls!r} with {attribute}={value!r}"
        )
    return hits / total


def disparity(
    table: LabeledTable,
    cls: str,
    attribute: str,
    l1: str,
    l2: str,
    min_support: int = DEFAULT_MIN_SUPPORT,
) -> float:
    """recall(l1) - recall(l2) for class ``cls``; requires min_support in both."""
    counts = {l1: 0, l2: 0}
    for r in table.records:
        if r.cls == cls and r.labels.get(attribute) in counts:
            counts[r.labels[attribute]] += 1
    for label, count in counts.items():
        if count < min_support:
            raise InsufficientSupportError(
                f"class {cls!r}: subgroup {label!r} has {count} < {min_support} records"
            )
    return subgroup_recall(table, cls, attribute, l1) - subgroup_recall(
        table, cls, attribute, l2
    )


def aggregate_absolute_disparities(
    values: Sequence[float],
) -> tuple[float, float, float]:
    """(mean, max, gap) of absolute disparities, with gap = max - mean."""
    abs_values = np.abs(np.asarray(values, dtype=np.float64))
    if abs_values.size == 0:
        raise EmptyReportError("no disparities to aggregate")
    mean = float(abs_values.mean())
    peak = float(abs_values.max())
    return mean, peak, peak - mean


def disparity_report(
    table: LabeledTable,
    attribute: str,
    l1: str,
    l2: str,
    min_support: int = DEFAULT_MIN_SUPPORT,
) -> DisparityReport:
    """Signed disparity per class plus Mean/Max/Gap over absolute values."""
    if not table.records:
        raise ValidationError("label table is empty")
    per_class: dict[str, float] = {}
    excluded: dict[str, str] = {}
    for cls in table.classes():
        try:
            per_class[cls] = disparity(table, cls, attribute, l1, l2, min_support)
        except InsufficientSupportError as exc:
            excluded[cls] = str(exc)
    if not per_class:
        raise EmptyReportError(
            f"every class excluded for attribute {attribute!r} "
            f"({l1!r} vs {l2!r}, min_support={min_support})"
        )
    mean, peak, gap = aggregate_absolute_disparities(list(per_class.values()))
    return DisparityReport(
        attribute=attribute,
        subgroup_1=l1,
        subgroup_2=l2,
        per_class=per_class,
        mean_abs=mean,
        max_abs=peak,
        gap=gap,
        excluded=excluded,
        min_support=min_support,
    )


def smooth_proportions(proportions: np.ndarray, delta: float) -> np.ndarray:
    """Additive smoothing: add delta to every value's share, renormalize."""
    p = np.asarray(proportions, dtype=np.float64)
    return (p + delta) / (1.0 + delta * p.size)


def _desired_vector(desired: DesiredDistribution, delta: float) -> np.ndarray:
    return smooth_proportions(
        np.asarray(list(desired.proportions.values()), dtype=np.float64), delta
    )


def _prefix_label_indices(
    retrieval: RankedRetrieval, labels: LabeledTable, desired: DesiredDistribution
) -> np.ndarray:
    """Vocabulary index of each of the top-k ranked samples."""
    label_map = labels.label_map(desired.attribute)
    index = {value: i for i, value in enumerate(desired.vocabulary)}
    out = np.empty(retrieval.k, dtype=np.intp)
    for pos, sample_id in enumerate(retrieval.ranking[: retrieval.k]):
        if sample_id not in label_map:
            raise ValidationError(f"ranked id {sample_id!r} missing from label table")
        value = label_map[sample_id]
        if value not in index:
            raise VocabularyError(
                f"attribute value {value!r} not covered by desired distribution"
            )
        out[pos] = index[value]
    return out


def _topk_actual(
    retrieval: RankedRetrieval,
    labels: LabeledTable,
    desired: DesiredDistribution,
    delta: float,
) -> np.ndarray:
    idx = _prefix_label_indices(retrieval, labels, desired)
    counts = np.bincount(idx, minlength=len(desired.vocabulary)).astype(np.float64)
    return smooth_proportions(counts / retrieval.k, delta)


def skew(
    retrieval: RankedRetrieval,
    labels: LabeledTable,
    desired: DesiredDistribution,
    value: str,
    delta: float = DEFAULT_SMOOTHING,
) -> float:
    """ln(actual share of ``value`` in the top-k / desired share), smoothed."""
    vocabulary = desired.vocabulary
    if value not in vocabulary:
        raise VocabularyError(f"value {value!r} not in attribute vocabulary")
    actual = _topk_actual(retrieval, labels, desired, delta)
    wanted = _desired_vector(desired, delta)
    vi = vocabulary.index(value)
    return float(np.log(actual[vi] / wanted[vi]))


def max_min_skew(
    retrieval: RankedRetrieval,
    labels: LabeledTable,
    desired: DesiredDistribution,
    delta: float = DEFAULT_SMOOTHING,
) -> tuple[float, float]:
    """(MaxSkew, |MinSkew|) over every attribute value."""
    if len(desired.vocabulary) < 2:
        raise ConfigError("skew extremes need an attribute with >= 2 values")
    actual = _topk_actual(retrieval, labels, desired, delta)
    wanted = _desired_vector(desired, delta)
    skews = np.log(actual / wanted)
    return float(skews.max()), float(abs(skews.min()))


def ndkl(
    retrieval: RankedRetrieval,
    labels: LabeledTable,
    desired: DesiredDistribution,
    delta: float = DEFAULT_SMOOTHING,
) -> float:
    """Discount-weighted mean over prefix depths of KL(prefix || desired)."""
    idx = _prefix_label_indices(retrieval, labels, desired)
    wanted = _desired_vector(desired, delta)
    counts = np.zeros(len(desired.vocabulary), dtype=np.float64)
    total = 0.0
    z = 0.0
    for i in range(1, retrieval.k + 1):
        counts[idx[i - 1]] += 1.0
        actual = smooth_proportions(counts / i, delta)
        kl = float(np.sum(actual * np.log(actual / wanted)))
        weight = 1.0 / np.log2(i + 1)
        total += weight * kl
        z += weight
    return total / z


@dataclass(frozen=True)
class AuditSummary:
    k: int
    n_queries: int
    per_attribute: Mapping[str, Mapping[str, float]]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_queries": self.n_queries,
            "attributes": {a: dict(m) for a, m in self.per_attribute.items()},
        }


def rank_by_similarity(
    image_embs: EmbeddingMatrix, query_vector: np.ndarray
) -> list[str]:
    """Image ids by descending similarity; ties broken by ascending id."""
    scores = image_embs.rows.astype(np.float64) @ np.asarray(
        query_vector, dtype=np.float64
    )
    return [
        sample_id
        for _, sample_id in sorted(
            zip(scores, image_embs.ids), key=lambda t: (-t[0], t[1])
        )
    ]


def audit_retrievals(
    queries: Sequence[str],
    image_embs: EmbeddingMatrix,
    caption_embs: EmbeddingMatrix,
    labels: LabeledTable,
    desired: Mapping[str, DesiredDistribution] | None,
    k: int,
    delta: float = DEFAULT_SMOOTHING,
) -> AuditSummary:
    """Rank images per query and average MaxSkew / |MinSkew| / NDKL per attribute."""
    if caption_embs.n != len(queries):
        raise ConfigError(
            f"{len(queries)} queries but {caption_embs.n} caption embeddings"
        )
    if k > image_embs.n:
        raise ConfigError(f"k={k} exceeds corpus size {image_embs.n}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    desired = dict(desired) if desired else {}
    for attribute in labels.attributes:
        if attribute not in desired:
            desired[attribute] = corpus_distribution(labels, attribute)

    sums = {
        attribute: {"max_skew": 0.0, "min_skew_abs": 0.0, "ndkl": 0.0}
        for attribute in labels.attributes
    }
    for qi, query in enumerate(queries):
        ranking = rank_by_similarity(image_embs, caption_embs.rows[qi])
        retrieval = RankedRetrieval(query=query, ranking=tuple(ranking), k=k)
        for attribute in labels.attributes:
            mx, mn = max_min_skew(retrieval, labels, desired[attribute], delta)
            sums[attribute]["max_skew"] += mx
            sums[attribute]["min_skew_abs"] += mn
            sums[attribute]["ndkl"] += ndkl(retrieval, labels, desired[attribute], delta)

    n_queries = len(queries)
    per_attribute = {
        attribute: {metric: value / n_queries for metric, value in metrics.items()}
        for attribute, metrics in sums.items()
    }
    return AuditSummary(k=k, n_queries=n_queries, per_attribute=per_attribute)


def load_age_bins() -> dict:
    """Shipped default mapping of numeric ages to coarse bins."""
    return json.loads(
        resources.files("fairdedup.data").joinpath("age_bins.json").read_text()
    )


def bin_age(age, bins: dict | None = None) -> str:
    """Map a numeric age to its configured bin name."""
    bins = bins or load_age_bins()
    age = float(age)
    for name, (low, high) in bins["bins"].items():
        if low <= age <= high:
            return name
    raise VocabularyError(f"age {age} outside configured bins")


def apply_age_bins(
    table: LabeledTable, attribute: str = "age", bins: dict | None = None
) -> LabeledTable:
    """Return a copy of the table with ``attribute`` labels replaced by bins."""
    bins = bins or load_age_bins()
    records = tuple(
        Record(
            id=r.id,
            cls=r.cls,
            predicted=r.predicted,
            labels={
                a: (bin_age(v, bins) if a == attribute else v)
                for a, v in r.labels.items()
            },
        )
        for r in table.records
    )
    return LabeledTable(attributes=table.attributes, records=records)
