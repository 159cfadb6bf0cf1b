"""Sensitive-concept prototypes built from templated caption embeddings.

A prototype is the renormalized mean of a concept's caption embeddings;
image-concept alignment is the cosine similarity to that prototype.
Text encoding itself happens outside the engine: captions are consumed as
an embedstore file whose rows follow :func:`expand_captions` order with
ids ``c{concept_index}:t{template_index}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .embedstore import EmbeddingMatrix
from .errors import DegenerateConceptError, DimensionError, ValidationError

PLACEHOLDER = "{concept}"

# A concept whose averaged captions fall below this norm carries no direction.
_DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class ConceptSpec:
    """Ordered concept strings plus caption templates with one placeholder each."""

    concepts: tuple[str, ...]
    templates: tuple[str, ...]

    def __post_init__(self):
        if not self.concepts:
            raise ValidationError("concept list is empty")
        if len(set(self.concepts)) != len(self.concepts):
            raise ValidationError("concepts are not unique")
        if not self.templates:
            raise ValidationError("template list is empty")
        for template in self.templates:
            if template.count(PLACEHOLDER) != 1:
                raise ValidationError(
                    f"template {template!r} must contain {PLACEHOLDER} exactly once"
                )

    @classmethod
    def from_json(cls, path) -> "ConceptSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            concepts=tuple(data["concepts"]), templates=tuple(data["templates"])
        )

    @classmethod
    def default(cls) -> "ConceptSpec":
        """The shipped 110-concept, 3-template configuration."""
        data = json.loads(
            resources.files("fairdedup.data").joinpath("concepts.json").read_text()
        )
        return cls(
            concepts=tuple(data["concepts"]), templates=tuple(data["templates"])
        )

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {"concepts": list(self.concepts), "templates": list(self.templates)},
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


@dataclass(frozen=True)
class ConceptPrototypeSet:
    """One unit-norm prototype vector per concept, in ConceptSpec order."""

    names: tuple[str, ...]
    vectors: np.ndarray  # m x d float32, unit rows

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def expand_captions(spec: ConceptSpec) -> list[tuple[int, str]]:
    """All (concept_index, caption) pairs in concept-major order."""
    return [
        (ci, template.replace(PLACEHOLDER, concept))
        for ci, concept in enumerate(spec.concepts)
        for template in spec.templates
    ]


def caption_ids(spec: ConceptSpec) -> list[str]:
    """Stable ids for caption embedding rows, aligned with expand_captions."""
    return [
        f"c{ci}:t{ti}"
        for ci in range(len(spec.concepts))
        for ti in range(len(spec.templates))
    ]


def build_prototypes(
    spec: ConceptSpec, caption_embeddings: EmbeddingMatrix
) -> ConceptPrototypeSet:
    """Average each concept's caption embeddings and renormalize."""
    n_templates = len(spec.templates)
    expected = len(spec.concepts) * n_templates
    if caption_embeddings.n != expected:
        raise ValidationError(
            f"expected {expected} caption embeddings "
            f"({len(spec.concepts)} concepts x {n_templates} templates), "
            f"got {caption_embeddings.n}"
        )
    rows = caption_embeddings.rows.astype(np.float64)
    vectors = np.empty((len(spec.concepts), caption_embeddings.d), dtype=np.float32)
    for ci, concept in enumerate(spec.concepts):
        mean = rows[ci * n_templates : (ci + 1) * n_templates].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < _DEGENERATE_NORM:
            raise DegenerateConceptError(
                f"concept {concept!r}: caption embeddings average to zero"
            )
        vectors[ci] = (mean / norm).astype(np.float32)
    return ConceptPrototypeSet(names=tuple(spec.concepts), vectors=vectors)


def concept_similarities(
    images: EmbeddingMatrix, protos: ConceptPrototypeSet
) -> np.ndarray:
    """n x m cosine similarities between image rows and prototypes (float64)."""
    if images.d != protos.d:
        raise DimensionError(
            f"images have d={images.d}, prototypes have d={protos.d}"
        )
    return images.rows.astype(np.float64) @ protos.vectors.astype(np.float64).T


def write_prototypes(protos: ConceptPrototypeSet, path) -> None:
    """Persist prototypes as an embedstore file with concept names as ids."""
    from . import embedstore

    embedstore.write_embeddings(
        EmbeddingMatrix.create(protos.names, protos.vectors), path
    )


def read_prototypes(path) -> ConceptPrototypeSet:
    from . import embedstore

    matrix = embedstore.read_embeddings(path)
    return ConceptPrototypeSet(names=matrix.ids, vectors=matrix.rows)
