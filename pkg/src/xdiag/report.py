"""Report serialization: atomic JSON and CSV writers.

Every report file embeds a schema-version field and the resolved run
configuration (including seeds) so downstream tooling can reject stale
formats and reruns are reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Sequence

SCHEMA_VERSION = 1


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json_report(path: str | Path, kind: str, payload: dict, config: dict | None = None) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    if config is not None:
        doc["config"] = config
    doc.update(payload)
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv_report(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def sibling(path: str | Path, suffix: str) -> Path:
    """Companion file next to a report: report.json → report.csv / report.png."""
    path = Path(path)
    return path.with_suffix(suffix) if path.suffix else Path(str(path) + suffix)
