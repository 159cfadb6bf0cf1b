"""Bridge operations: manifest-driven image and caption encoding."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import BridgeError, ValidationError
from . import encoders, store

PLACEHOLDER = "{concept}"


@dataclass(frozen=True)
class BridgeManifest:
    model: str
    output: Path
    images: tuple[str, ...] = ()
    concept_spec: Path | None = None
    input_root: Path = Path(".")
    batch_size: int = 32
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_json(cls, path) -> "BridgeManifest":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        root = Path(data.get("input_root", path.parent))
        if not root.is_absolute():
            root = path.parent / root
        output = Path(data["output"])
        if not output.is_absolute():
            output = path.parent / output
        spec = data.get("concept_spec")
        if spec is not None:
            spec = Path(spec)
            if not spec.is_absolute():
                spec = path.parent / spec
        return cls(
            model=data["model"],
            output=output,
            images=tuple(data.get("images", ())),
            concept_spec=spec,
            input_root=root,
            batch_size=int(data.get("batch_size", 32)),
            device=str(data.get("device", "cpu")),
        )


@dataclass
class SidecarLog:
    model: str
    preprocessing: str
    kind: str
    n_rows: int = 0
    skipped: list[dict] = field(default_factory=list)

    def write(self, output: Path) -> Path:
        path = Path(str(output) + ".log.json")
        path.write_text(
            json.dumps(
                {
                    "model": self.model,
                    "preprocessing": self.preprocessing,
                    "kind": self.kind,
                    "n_rows": self.n_rows,
                    "skipped": self.skipped,
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        return path


def _batched(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _finalize(manifest: BridgeManifest, ids, rows, log: SidecarLog) -> Path:
    manifest.output.parent.mkdir(parents=True, exist_ok=True)
    if rows:
        matrix = np.vstack(rows)
    else:
        dim = encoders.resolve(manifest.model, manifest.device).dim
        matrix = np.empty((0, dim), dtype=np.float32)
    store.write_embedding_file(manifest.output, ids, matrix)
    # emitted files must satisfy the store invariants before we exit
    read_ids, read_rows = store.read_embedding_file(manifest.output)
    if read_ids != list(ids) or read_rows.shape != matrix.shape:
        raise ValidationError(f"{manifest.output}: self-check failed after write")
    log.n_rows = len(ids)
    log.write(manifest.output)
    return manifest.output


def encode_images(manifest: BridgeManifest) -> Path:
    """One embedding row per readable image; ids are the listed relative paths."""
    encoder = encoders.resolve(manifest.model, manifest.device)
    log = SidecarLog(manifest.model, encoder.preprocessing, kind="images")
    ids: list[str] = []
    rows: list[np.ndarray] = []
    loaded: list[Image.Image] = []
    for rel_path in manifest.images:
        full = manifest.input_root / rel_path
        try:
            with Image.open(full) as img:
                loaded.append(img.convert("RGB"))
            ids.append(rel_path)
        except (OSError, UnidentifiedImageError) as exc:
            warnings.warn(f"skipping unreadable image {full}: {exc}")
            log.skipped.append({"path": str(rel_path), "error": str(exc)})
    for batch_start in range(0, len(loaded), manifest.batch_size):
        batch = loaded[batch_start : batch_start + manifest.batch_size]
        rows.append(encoder.encode_images(batch))
    return _finalize(manifest, ids, rows, log)


def load_concept_spec(path) -> tuple[list[str], list[str]]:
    """Concepts and templates from a ConceptSpec JSON file, validated."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    concepts = [str(c) for c in data["concepts"]]
    templates = [str(t) for t in data["templates"]]
    if not concepts or len(set(concepts)) != len(concepts):
        raise ValidationError(f"{path}: concepts must be non-empty and unique")
    for template in templates:
        if template.count(PLACEHOLDER) != 1:
            raise ValidationError(
                f"{path}: template {template!r} must contain {PLACEHOLDER} exactly once"
            )
    if not templates:
        raise ValidationError(f"{path}: template list is empty")
    return concepts, templates


def expand_captions(concepts, templates) -> tuple[list[str], list[str]]:
    """Concept-major caption expansion with the engine's id convention."""
    ids = []
    captions = []
    for ci, concept in enumerate(concepts):
        for ti, template in enumerate(templates):
            ids.append(f"c{ci}:t{ti}")
            captions.append(template.replace(PLACEHOLDER, concept))
    return ids, captions


def encode_captions(manifest: BridgeManifest) -> Path:
    """Embed every templated concept caption, ordered concept-major."""
    if manifest.concept_spec is None:
        raise BridgeError("manifest has no concept_spec entry")
    concepts, templates = load_concept_spec(manifest.concept_spec)
    ids, captions = expand_captions(concepts, templates)
    encoder = encoders.resolve(manifest.model, manifest.device)
    log = SidecarLog(manifest.model, encoder.preprocessing, kind="captions")
    rows = [
        encoder.encode_texts(batch)
        for batch in _batched(captions, manifest.batch_size)
    ]
    return _finalize(manifest, ids, rows, log)
