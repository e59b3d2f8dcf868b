"""Extraction jobs: encode inputs, normalize, write EMB1 stores."""

from __future__ import annotations

import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .emb1 import FormatError, read_emb1, write_emb1
from .encoders import make_encoder

log = logging.getLogger("xdiag_extract")

NORM_TOL = 1e-5


class ExtractionError(RuntimeError):
    pass


@dataclass
class Annotations:
    labels: dict[str, int | None]
    attributes: dict[str, dict[str, str]]  # family → id → value
    families: list[str]

    @classmethod
    def load(cls, path: str | Path) -> "Annotations":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or reader.fieldnames[:2] != ["id", "label"]:
                raise ExtractionError(
                    f"annotation file {path} must start with columns id,label"
                )
            families = list(reader.fieldnames[2:])
            labels: dict[str, int | None] = {}
            attributes: dict[str, dict[str, str]] = {f: {} for f in families}
            for row in reader:
                key = row["id"]
                labels[key] = int(row["label"]) if row["label"] != "" else None
                for fam in families:
                    attributes[fam][key] = row[fam]
        return cls(labels=labels, attributes=attributes, families=families)


@dataclass
class ExtractionJob:
    inputs: list[str]  # file paths (image) or strings (text), one modality per job
    modality: str  # "image" | "text"
    encoder_id: str
    out_path: str
    batch_size: int = 32
    annotations: Annotations | None = None
    on_error: str = "abort"  # "abort" | "skip"

    def validate(self) -> None:
        if self.modality not in ("image", "text"):
            raise ExtractionError(f"modality must be image or text, got {self.modality!r}")
        if not self.inputs:
            raise ExtractionError("no inputs")
        if self.on_error not in ("abort", "skip"):
            raise ExtractionError(f"on_error must be abort or skip, got {self.on_error!r}")
        if self.annotations is not None:
            missing = [i for i in self.inputs if i not in self.annotations.labels]
            if missing:
                raise ExtractionError(
                    f"{len(missing)} inputs missing from the annotation table, e.g. {missing[0]!r}"
                )


def read_manifest(path: str | Path) -> list[str]:
    """Newline-delimited UTF-8 input list; blank lines dropped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line]


def extract(job: ExtractionJob) -> Path:
    """Encode the job's inputs and write the EMB1 store + sidecar.

    Embeddings are ℓ2-normalized. Text store ids are the exact input
    strings so prompt lookups resolve verbatim; image ids are the input
    paths as given.
    """
    job.validate()
    encoder = make_encoder(job.encoder_id, batch_size=job.batch_size)

    inputs = list(job.inputs)
    if job.modality == "image":
        readable = []
        for p in inputs:
            if Path(p).is_file():
                readable.append(p)
            elif job.on_error == "skip":
                log.warning("skipping unreadable input %s", p)
            else:
                raise ExtractionError(f"unreadable input: {p}")
        inputs = readable
        if not inputs:
            raise ExtractionError("all inputs were unreadable")
        matrix = encoder.encode_images(inputs)
    else:
        matrix = encoder.encode_texts(inputs)

    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0).any():
        raise ExtractionError(f"encoder produced a zero embedding at row {int((norms == 0).argmax())}")
    matrix = matrix / norms[:, None]

    labels = None
    attributes = None
    if job.annotations is not None:
        ann = job.annotations
        row_labels = [ann.labels[i] for i in inputs]
        defined = [l for l in row_labels if l is not None]
        if defined and len(defined) != len(row_labels):
            raise ExtractionError("annotation table mixes labeled and unlabeled rows")
        labels = row_labels if defined else None
        attributes = {fam: [ann.attributes[fam][i] for i in inputs] for fam in ann.families}

    out = Path(job.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_emb1(
        out,
        matrix,
        modality=job.modality,
        normalized=True,
        ids=inputs,
        labels=labels,
        attributes=attributes,
        class_names=None,
        source=f"xdiag-extract {job.encoder_id}",
    )
    return out


def verify(store_path: str | Path, stream=None) -> int:
    """Check a store file; print a summary; return 0 if healthy.

    Failures (bad magic, shape/size problems, norm violations, meta
    length mismatches) return 1 with the failed check named. A missing
    sidecar is a warning, not a failure.
    """
    stream = stream or sys.stdout
    store_path = Path(store_path)
    try:
        matrix, modality, normalized, meta = read_emb1(store_path)
    except (FormatError, OSError) as exc:
        print(f"FAIL format: {exc}", file=stream)
        return 1
    n, d = matrix.shape
    if normalized:
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
        if bad.size:
            print(
                f"FAIL normalization: row {bad[0]} has norm {norms[bad[0]]:.6f} (tolerance {NORM_TOL})",
                file=stream,
            )
            return 1
    if not Path(str(store_path) + ".meta.json").exists():
        print(f"WARN missing sidecar {store_path}.meta.json", file=stream)
    else:
        for key in ("ids", "labels"):
            arr = meta.get(key)
            if arr and len(arr) != n:
                print(f"FAIL meta coverage: {key} has {len(arr)} entries for {n} rows", file=stream)
                return 1
        for fam, values in (meta.get("attributes") or {}).items():
            if len(values) != n:
                print(f"FAIL meta coverage: attribute {fam!r} has {len(values)} entries for {n} rows", file=stream)
                return 1
    print(f"OK n={n} d={d} modality={modality} normalized={normalized}", file=stream)
    return 0
