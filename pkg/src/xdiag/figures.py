"""Matplotlib figure rendering for report files.

Each report-writing CLI path can drop a PNG next to its JSON/CSV output.
Figures are rendered with the Agg backend and fixed metadata so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_SAVEFIG = {"dpi": 110, "metadata": {"Software": "xdiag"}}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def gap_figure(per_pair: list[dict], path: str | Path) -> None:
    """Histograms of the per-pair gap statistics."""
    panels = [
        ("magnitude", "gap magnitude"),
        ("direction", "direction cosine"),
        ("orthogonality_image", "orthogonality (image)"),
        ("orthogonality_text", "orthogonality (text)"),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    for ax, (key, label) in zip(axes, panels):
        values = [row[key] for row in per_pair if row[key] is not None]
        if values:
            ax.hist(values, bins=40, color="#4878cf")
        else:
            ax.text(0.5, 0.5, "undefined", ha="center", va="center", transform=ax.transAxes)
        ax.set_title(label, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def slice_figure(rows: list[dict], path: str | Path) -> None:
    """Horizontal bars of per-slice text proxy (and image accuracy if present)."""
    names = [r["slice"] for r in rows]
    proxy = [r["proxy_score"] for r in rows]
    y = range(len(names))
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(names) + 1)))
    ax.barh(list(y), proxy, color="#4878cf", label="text proxy")
    image = [r.get("image_accuracy") for r in rows]
    if any(v is not None for v in image):
        xs = [v if v is not None else 0.0 for v in image]
        ax.plot(xs, list(y), "o", color="#d65f5f", label="image accuracy")
    ax.set_yticks(list(y))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def influence_figure(rows: list[dict], path: str | Path) -> None:
    names = [f"{r['family']}={r['token']}" for r in rows]
    values = [r["influence"] for r in rows]
    colors = ["#d65f5f" if v < 0 else "#4878cf" for v in values]
    y = range(len(names))
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(names) + 1)))
    ax.barh(list(y), values, color=colors)
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_yticks(list(y))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("influence")
    fig.tight_layout()
    _save(fig, path)


def rectify_figure(rows: list[dict], path: str | Path) -> None:
    names = [r["slice"] for r in rows]
    before = [r["accuracy_before"] if r["accuracy_before"] is not None else 0.0 for r in rows]
    after = [r["accuracy_after"] if r["accuracy_after"] is not None else 0.0 for r in rows]
    y = list(range(len(names)))
    h = 0.38
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.5 * len(names) + 1)))
    ax.barh([v - h / 2 for v in y], before, height=h, color="#8c8c8c", label="before")
    ax.barh([v + h / 2 for v in y], after, height=h, color="#4878cf", label="after")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def correlation_figure(pairing: list[dict], spearman, pearson, path: str | Path) -> None:
    xs = [p["text_score"] for p in pairing]
    ys = [p["image_score"] for p in pairing]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.plot(xs, ys, "o", color="#4878cf")
    ax.set_xlabel("text proxy score")
    ax.set_ylabel("image score")
    s = "n/a" if spearman is None else f"{spearman:.4f}"
    p = "n/a" if pearson is None else f"{pearson:.4f}"
    ax.set_title(f"spearman {s}   pearson {p}", fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def residuals_figure(residuals: Sequence[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(range(len(residuals)), [max(r, 1e-18) for r in residuals], ".", color="#4878cf")
    ax.set_xlabel("trial")
    ax.set_ylabel("residual")
    fig.tight_layout()
    _save(fig, path)
