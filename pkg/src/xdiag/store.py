"""Embedding stores: an n×d float matrix plus per-row metadata.

On disk a store is the binary "EMB1 v1" format (little-endian float32,
row-major) with a JSON metadata sidecar at ``<path>.meta.json``. In memory
the matrix may be float64; writing casts to float32.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
MODALITIES = ("image", "text", "other")
NORM_TOL = 1e-5

_HEADER = struct.Struct("<4sBBBBII")  # magic, version, modality, normalized, reserved, n, d


class StoreError(ValueError):
    """Malformed store file or store invariant violation."""


Labels = "list[int] | list[list[int]] | None"


@dataclass
class StoreMeta:
    """Per-row metadata. Arrays are either absent (None) or length n.

    ``labels`` holds one class index per row, or a sorted index list per row
    for multi-label tasks.
    """

    ids: list[str] | None = None
    labels: list | None = None
    attributes: dict[str, list[str]] | None = None
    class_names: list[str] | None = None
    source: str = ""

    def validate(self, n: int) -> None:
        for name, arr in (("ids", self.ids), ("labels", self.labels)):
            if arr is not None and len(arr) != n:
                raise StoreError(f"meta length mismatch: {name} has {len(arr)} entries, expected {n}")
        if self.attributes is not None:
            for family, values in self.attributes.items():
                if len(values) != n:
                    raise StoreError(
                        f"meta length mismatch: attribute family {family!r} has {len(values)} entries, expected {n}"
                    )
                for i, v in enumerate(values):
                    if not isinstance(v, str) or v == "":
                        raise StoreError(f"attribute family {family!r} row {i}: value must be a non-empty string")
        if self.labels is not None and self.class_names is not None:
            n_classes = len(self.class_names)
            for i, lab in enumerate(self.labels):
                idxs = lab if isinstance(lab, (list, tuple)) else [lab]
                for c in idxs:
                    if not (0 <= int(c) < n_classes):
                        raise StoreError(f"label {c} at row {i} outside [0, {n_classes})")

    @property
    def multilabel(self) -> bool:
        return self.labels is not None and len(self.labels) > 0 and isinstance(self.labels[0], (list, tuple))

    def to_json_dict(self) -> dict:
        return {
            "ids": list(self.ids) if self.ids is not None else [],
            "labels": self.labels,
            "attributes": self.attributes,
            "class_names": self.class_names,
            "source": self.source,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "StoreMeta":
        ids = obj.get("ids") or None
        labels = obj.get("labels")
        if labels is not None:
            labels = [sorted(int(c) for c in lab) if isinstance(lab, list) else int(lab) for lab in labels]
        return cls(
            ids=list(ids) if ids else None,
            labels=labels,
            attributes=obj.get("attributes"),
            class_names=obj.get("class_names"),
            source=obj.get("source") or "",
        )


@dataclass
class EmbeddingStore:
    """One modality's embeddings. Immutable by convention after creation."""

    matrix: np.ndarray
    modality: str = "other"
    normalized: bool = False
    meta: StoreMeta = field(default_factory=StoreMeta)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def validate(self) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise StoreError(f"matrix must be n×d with n,d ≥ 1; got shape {m.shape}")
        if not np.isfinite(m).all():
            raise StoreError("matrix contains non-finite entries")
        if self.modality not in MODALITIES:
            raise StoreError(f"unknown modality {self.modality!r}")
        if self.normalized:
            norms = np.linalg.norm(np.asarray(m, dtype=np.float64), axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
            if bad.size:
                raise StoreError(f"normalized flag set but row {bad[0]} has norm {norms[bad[0]]:.6g}")
        self.meta.validate(self.n)

    def with_matrix(self, matrix: np.ndarray, normalized: bool | None = None) -> "EmbeddingStore":
        return replace(
            self,
            matrix=matrix,
            normalized=self.normalized if normalized is None else normalized,
        )


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write ``store`` as EMB1 v1 plus its ``.meta.json`` sidecar.

    Rejects invariant violations before touching the filesystem; the data
    file and sidecar are each written atomically (temp file + rename).
    """
    store.validate()
    path = Path(path)
    if not path.parent.exists():
        raise StoreError(f"parent directory does not exist: {path.parent}")
    data = np.ascontiguousarray(store.matrix, dtype="<f4")
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        MODALITIES.index(store.modality),
        1 if store.normalized else 0,
        0,
        store.n,
        store.d,
    )
    _atomic_write_bytes(path, header + data.tobytes(order="C"))
    sidecar = json.dumps(store.meta.to_json_dict(), indent=2) + "\n"
    _atomic_write_bytes(Path(str(path) + ".meta.json"), sidecar.encode("utf-8"))


def read_store(path: str | Path) -> EmbeddingStore:
    """Read an EMB1 v1 store. A missing sidecar yields empty metadata."""
    path = Path(path)
    if not path.exists():
        raise StoreError(f"store file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreError(f"size mismatch: file shorter than the {_HEADER.size}-byte header")
    magic, version, modality_code, normalized, reserved, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"version {version} unsupported")
    if modality_code >= len(MODALITIES):
        raise StoreError(f"unknown modality code {modality_code}")
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise StoreError(f"size mismatch: expected {expected} bytes for {n}×{d}, found {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d).copy()
    if not np.isfinite(matrix).all():
        raise StoreError("matrix contains non-finite entries")

    meta = StoreMeta()
    sidecar = Path(str(path) + ".meta.json")
    if sidecar.exists():
        meta = StoreMeta.from_json_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    store = EmbeddingStore(
        matrix=matrix,
        modality=MODALITIES[modality_code],
        normalized=bool(normalized),
        meta=meta,
    )
    store.validate()
    return store


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    """Scale every row to unit ℓ2 norm (float64). Zero rows are rejected."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise StoreError(f"cannot normalize all-zero row {zero[0]}")
    return m / norms[:, None]


def labels_as_multihot(labels: Sequence, n_classes: int) -> np.ndarray:
    """Convert per-row labels (indices or index lists) to an n×C 0/1 matrix."""
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    for i, lab in enumerate(labels):
        idxs = lab if isinstance(lab, (list, tuple)) else [lab]
        for c in idxs:
            out[i, int(c)] = 1.0
    return out
