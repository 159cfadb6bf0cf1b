"""Encoder registry.

A manifest names its encoder with a single string:

* ``hashed:<dim>`` -- deterministic content-hash featurizer.  Not a learned
  model: identical inputs map to identical vectors, distinct inputs to
  near-orthogonal ones.  It exists so the bridge contract (file format, id
  conventions, skip handling) is testable without downloading weights.
* ``hf-clip:<model_id>`` -- any Hugging Face CLIP-style checkpoint with
  image and text heads (lazily imported; requires the ``transformers`` and
  ``torch`` packages and locally available weights).
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import BridgeError

_HASHED_SIDE = 32  # canonical RGB raster size hashed by the test encoder


class HashedEncoder:
    """Deterministic bytes-to-vector featurizer with image and text heads."""

    def __init__(self, dim: int):
        if dim < 2:
            raise BridgeError(f"hashed encoder dimension must be >= 2, got {dim}")
        self.dim = dim
        self.preprocessing = (
            f"RGB convert, bilinear resize to {_HASHED_SIDE}x{_HASHED_SIDE}, "
            "sha256 of raster bytes seeds a unit Gaussian draw"
        )

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        seed = np.frombuffer(digest, dtype=np.uint32)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        return rng.standard_normal(self.dim).astype(np.float32)

    def encode_images(self, images) -> np.ndarray:
        out = np.empty((len(images), self.dim), dtype=np.float32)
        for i, image in enumerate(images):
            raster = image.convert("RGB").resize((_HASHED_SIDE, _HASHED_SIDE))
            out[i] = self._vector(raster.tobytes())
        return out

    def encode_texts(self, texts) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = self._vector(text.encode("utf-8"))
        return out


class HFClipEncoder:
    """Hugging Face CLIP adapter (image and text feature heads)."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise BridgeError(
                "hf-clip encoders need the transformers and torch packages"
            ) from exc
        self._torch = torch
        self.device = device
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.dim = self.model.config.projection_dim
        self.preprocessing = f"CLIPProcessor defaults for {model_id}"

    def encode_images(self, images) -> np.ndarray:
        inputs = self.processor(
            images=[img.convert("RGB") for img in images], return_tensors="pt"
        ).to(self.device)
        with self._torch.no_grad():
            features = self.model.get_image_features(**inputs)
        return features.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts) -> np.ndarray:
        inputs = self.processor(
            text=list(texts), return_tensors="pt", padding=True, truncation=True
        ).to(self.device)
        with self._torch.no_grad():
            features = self.model.get_text_features(**inputs)
        return features.cpu().numpy().astype(np.float32)


def resolve(model: str, device: str = "cpu"):
    """Build the encoder named by a manifest model string."""
    kind, _, arg = model.partition(":")
    if kind == "hashed":
        try:
            dim = int(arg or "64")
        except ValueError:
            raise BridgeError(f"bad hashed encoder dimension {arg!r}") from None
        return HashedEncoder(dim)
    if kind == "hf-clip":
        if not arg:
            raise BridgeError("hf-clip needs a model id, e.g. hf-clip:openai/clip-vit-base-patch16")
        return HFClipEncoder(arg, device=device)
    raise BridgeError(f"unknown encoder {model!r} (expected hashed:<dim> or hf-clip:<id>)")
