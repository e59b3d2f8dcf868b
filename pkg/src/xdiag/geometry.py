"""Modality-gap geometry: per-pair gaps, distribution statistics, gap closing.

For aligned image/text stores the gap of pair i is g_i = x_i − y_i. The
report summarizes, at the individual and (when labels exist) class level:

* magnitude: ‖g‖
* direction: cos(g, E[g])
* orthogonality, per modality: cos(u − E[u], E[g])
* center, per modality: the d per-dimension means of u − (uᵀg′)g′ pooled
  into one mean ± std, where g′ = E[g]/‖E[g]‖

Statistics that divide by ‖E[g]‖ are reported as None when the mean gap is
numerically zero (an already-closed pair of stores) instead of propagating
NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .store import EmbeddingStore, StoreError

ZERO_GAP_TOL = 1e-12


@dataclass
class Stat:
    mean: float
    std: float

    def to_json_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


@dataclass
class LevelStats:
    magnitude: Stat
    direction: Stat | None  # None when the level's mean gap is ~0

    def to_json_dict(self) -> dict:
        return {
            "magnitude": self.magnitude.to_json_dict(),
            "direction": self.direction.to_json_dict() if self.direction else None,
        }


@dataclass
class GapReport:
    mean_gap: np.ndarray
    individual: LevelStats
    class_level: LevelStats | None
    orthogonality: dict[str, Stat] | None  # keys "image"/"text"; None when mean gap ~0
    center: dict[str, Stat] | None
    n_pairs: int
    n_classes: int | None

    def to_json_dict(self) -> dict:
        return {
            "mean_gap": [float(v) for v in self.mean_gap],
            "individual": self.individual.to_json_dict(),
            "class_level": self.class_level.to_json_dict() if self.class_level else None,
            "orthogonality": (
                {k: v.to_json_dict() for k, v in self.orthogonality.items()} if self.orthogonality else None
            ),
            "center": {k: v.to_json_dict() for k, v in self.center.items()} if self.center else None,
            "n_pairs": self.n_pairs,
            "n_classes": self.n_classes,
        }


def _stat(values: np.ndarray) -> Stat:
    return Stat(mean=float(np.mean(values)), std=float(np.std(values)))


def _check_aligned(img: EmbeddingStore, txt: EmbeddingStore) -> None:
    if img.matrix.shape != txt.matrix.shape:
        raise StoreError(f"shape mismatch: image {img.matrix.shape} vs text {txt.matrix.shape}")


def pair_gaps(img: EmbeddingStore, txt: EmbeddingStore) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair gaps (row i = img_i − txt_i) and their column mean."""
    _check_aligned(img, txt)
    gaps = np.asarray(img.matrix, dtype=np.float64) - np.asarray(txt.matrix, dtype=np.float64)
    return gaps, gaps.mean(axis=0)


def _cosines(rows: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """cos between each row and ref; rows with zero norm contribute 0."""
    ref_norm = np.linalg.norm(ref)
    row_norms = np.linalg.norm(rows, axis=1)
    denom = row_norms * ref_norm
    out = np.zeros(rows.shape[0])
    ok = denom > 0
    out[ok] = (rows[ok] @ ref) / denom[ok]
    return out


def _class_means(matrix: np.ndarray, labels: list, class_indices: Iterable[int]) -> dict[int, np.ndarray]:
    means = {}
    for c in class_indices:
        mask = [
            (c in lab) if isinstance(lab, (list, tuple)) else (lab == c)
            for lab in labels
        ]
        mask = np.asarray(mask, dtype=bool)
        if mask.any():
            means[c] = matrix[mask].mean(axis=0)
    return means


def _label_classes(labels: list) -> list[int]:
    seen: set[int] = set()
    for lab in labels:
        if isinstance(lab, (list, tuple)):
            seen.update(int(c) for c in lab)
        else:
            seen.add(int(lab))
    return sorted(seen)


def gap_report(img: EmbeddingStore, txt: EmbeddingStore) -> GapReport:
    """Gap geometry statistics for aligned paired stores.

    Class-level statistics need labels in either store's metadata; otherwise
    only the individual level is reported.
    """
    _check_aligned(img, txt)
    X = np.asarray(img.matrix, dtype=np.float64)
    Y = np.asarray(txt.matrix, dtype=np.float64)
    gaps, mean_gap = pair_gaps(img, txt)
    gap_norm = np.linalg.norm(mean_gap)

    magnitude = _stat(np.linalg.norm(gaps, axis=1))
    direction = _stat(_cosines(gaps, mean_gap)) if gap_norm > ZERO_GAP_TOL else None
    individual = LevelStats(magnitude=magnitude, direction=direction)

    orthogonality = None
    center = None
    if gap_norm > ZERO_GAP_TOL:
        g_unit = mean_gap / gap_norm
        orthogonality = {
            "image": _stat(_cosines(X - X.mean(axis=0), mean_gap)),
            "text": _stat(_cosines(Y - Y.mean(axis=0), mean_gap)),
        }
        center = {}
        for key, M in (("image", X), ("text", Y)):
            projected = M - np.outer(M @ g_unit, g_unit)
            center[key] = _stat(projected.mean(axis=0))

    labels = img.meta.labels if img.meta.labels is not None else txt.meta.labels
    class_level = None
    n_classes = None
    if labels is not None:
        classes = _label_classes(labels)
        x_means = _class_means(X, labels, classes)
        y_means = _class_means(Y, labels, classes)
        present = sorted(set(x_means) & set(y_means))
        n_classes = len(present)
        if present:
            class_gaps = np.stack([x_means[c] - y_means[c] for c in present])
            class_mean_gap = class_gaps.mean(axis=0)
            class_direction = (
                _stat(_cosines(class_gaps, class_mean_gap))
                if np.linalg.norm(class_mean_gap) > ZERO_GAP_TOL
                else None
            )
            class_level = LevelStats(
                magnitude=_stat(np.linalg.norm(class_gaps, axis=1)),
                direction=class_direction,
            )

    return GapReport(
        mean_gap=mean_gap,
        individual=individual,
        class_level=class_level,
        orthogonality=orthogonality,
        center=center,
        n_pairs=X.shape[0],
        n_classes=n_classes,
    )


def per_pair_stats(img: EmbeddingStore, txt: EmbeddingStore) -> list[dict]:
    """Raw per-pair geometry samples backing the report (for CSV export)."""
    _check_aligned(img, txt)
    X = np.asarray(img.matrix, dtype=np.float64)
    Y = np.asarray(txt.matrix, dtype=np.float64)
    gaps, mean_gap = pair_gaps(img, txt)
    degenerate = np.linalg.norm(mean_gap) <= ZERO_GAP_TOL
    mags = np.linalg.norm(gaps, axis=1)
    dirs = None if degenerate else _cosines(gaps, mean_gap)
    orth_x = None if degenerate else _cosines(X - X.mean(axis=0), mean_gap)
    orth_y = None if degenerate else _cosines(Y - Y.mean(axis=0), mean_gap)
    rows = []
    for i in range(X.shape[0]):
        rows.append(
            {
                "pair": i,
                "magnitude": float(mags[i]),
                "direction": None if dirs is None else float(dirs[i]),
                "orthogonality_image": None if orth_x is None else float(orth_x[i]),
                "orthogonality_text": None if orth_y is None else float(orth_y[i]),
            }
        )
    return rows


def close_gap(store: EmbeddingStore) -> tuple[EmbeddingStore, np.ndarray]:
    """Center the store on its column mean and return (store, subtracted mean).

    The mean is persisted with trained models so evaluation-time inputs of
    either modality can be centered by their own modality mean. No
    re-normalization is applied; the output's normalized flag is False.
    """
    matrix = np.asarray(store.matrix, dtype=np.float64)
    mean = matrix.mean(axis=0)
    return store.with_matrix(matrix - mean, normalized=False), mean
