"""EMB1 v1 binary store writer/reader, implemented from the format contract.

Layout: bytes 0-3 ASCII "EMB1"; byte 4 version=1; byte 5 modality code
(0 image, 1 text, 2 other); byte 6 normalized flag; byte 7 reserved;
bytes 8-11 u32 LE row count; bytes 12-15 u32 LE dimension; then n*d
float32 LE row-major. Sidecar "<path>.meta.json" carries ids, labels,
attributes, class_names, source.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
MODALITIES = ("image", "text", "other")
HEADER = struct.Struct("<4sBBBBII")


class FormatError(ValueError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_emb1(
    path: str | Path,
    matrix: np.ndarray,
    modality: str,
    normalized: bool,
    ids: list[str],
    labels: list | None = None,
    attributes: dict[str, list[str]] | None = None,
    class_names: list[str] | None = None,
    source: str = "",
) -> None:
    path = Path(path)
    data = np.ascontiguousarray(matrix, dtype="<f4")
    n, d = data.shape
    if len(ids) != n:
        raise FormatError(f"{len(ids)} ids for {n} rows")
    header = HEADER.pack(MAGIC, VERSION, MODALITIES.index(modality), int(normalized), 0, n, d)
    _atomic_write(path, header + data.tobytes(order="C"))
    meta = {
        "ids": ids,
        "labels": labels,
        "attributes": attributes,
        "class_names": class_names,
        "source": source,
    }
    _atomic_write(Path(str(path) + ".meta.json"), (json.dumps(meta, indent=2) + "\n").encode("utf-8"))


def read_emb1(path: str | Path) -> tuple[np.ndarray, str, bool, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError("file shorter than the 16-byte header")
    magic, version, modality_code, normalized, _, n, d = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if len(raw) != HEADER.size + 4 * n * d:
        raise FormatError(f"size mismatch for {n}×{d}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, d).copy()
    sidecar = Path(str(path) + ".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return matrix, MODALITIES[modality_code], bool(normalized), meta
