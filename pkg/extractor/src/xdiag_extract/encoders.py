"""Encoder registry.

Encoder ids:

* ``clip:<model-name>`` — a pretrained contrastive vision-language model
  loaded through transformers (requires the ``clip`` extra and either
  cached weights or network access).
* ``hash:<dim>`` — a deterministic content-hash encoder for contract
  tests and offline pipeline dry runs. Texts hash their UTF-8 bytes,
  images hash their file bytes, so embeddings are stable across runs and
  machines. It carries no semantics beyond content identity.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

import numpy as np


class EncoderError(RuntimeError):
    pass


class HashEncoder:
    """Deterministic bytes→unit-vector encoder (testing/dry runs)."""

    def __init__(self, dim: int):
        if dim < 1:
            raise EncoderError(f"dimension must be ≥ 1, got {dim}")
        self.dim = dim

    def _encode_bytes(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._encode_bytes(t.encode("utf-8")) for t in texts])

    def encode_images(self, paths: Sequence[str]) -> np.ndarray:
        return np.stack([self._encode_bytes(Path(p).read_bytes()) for p in paths])


class ClipEncoder:
    """Pretrained contrastive encoder via transformers (lazy import)."""

    def __init__(self, model_name: str, batch_size: int = 32):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError(
                "clip encoders need the 'clip' extra (torch, transformers, Pillow)"
            ) from exc
        try:
            self.model = CLIPModel.from_pretrained(model_name)
            self.processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderError(f"could not load encoder {model_name!r}: {exc}") from exc
        self.model.eval()
        self.batch_size = batch_size

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        import torch

        out = []
        with torch.no_grad():
            for i in range(0, len(texts), self.batch_size):
                batch = list(texts[i : i + self.batch_size])
                inputs = self.processor(text=batch, return_tensors="pt", padding=True, truncation=True)
                out.append(self.model.get_text_features(**inputs).cpu().numpy())
        return np.concatenate(out, axis=0)

    def encode_images(self, paths: Sequence[str]) -> np.ndarray:
        import torch
        from PIL import Image

        out = []
        with torch.no_grad():
            for i in range(0, len(paths), self.batch_size):
                images = [Image.open(p).convert("RGB") for p in paths[i : i + self.batch_size]]
                inputs = self.processor(images=images, return_tensors="pt")
                out.append(self.model.get_image_features(**inputs).cpu().numpy())
        return np.concatenate(out, axis=0)


def make_encoder(encoder_id: str, batch_size: int = 32):
    if encoder_id.startswith("hash:"):
        return HashEncoder(int(encoder_id.split(":", 1)[1]))
    if encoder_id.startswith("clip:"):
        return ClipEncoder(encoder_id.split(":", 1)[1], batch_size=batch_size)
    raise EncoderError(f"unknown encoder id {encoder_id!r}; expected clip:<model> or hash:<dim>")
