"""Rectification: continued training of a probe on error-slice text prompts.

For each discovered slice we compose its prompt set (attribute composition ×
templates × ensemble), embed the prompts, and continue training the probe
from its current weights on those text embeddings only — no image data.
Snapshot selection uses the loss on the rectification text set itself, and
the same hyperparameters as image training except the epoch count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diagnose import Slice, embed_all, match_slice_rows, resolve_text_mean
from .probe import ProbeModel, TrainConfig, predict, train
from .prompts import AttributeSchema, Template, generate
from .store import EmbeddingStore, StoreMeta

TextEmbed = Callable[[str], np.ndarray]

RECTIFY_EPOCHS = 10


class RectifyError(ValueError):
    pass


def rectify_config(seed: int = 0, epochs: int = RECTIFY_EPOCHS, learning_rate: float = 1e-3,
                   batch_size: int = 256) -> TrainConfig:
    return TrainConfig(learning_rate=learning_rate, epochs=epochs, batch_size=batch_size, seed=seed)


@dataclass
class RectifySet:
    matrix: np.ndarray
    labels: list[int]
    prompt_counts: dict[str, int]  # slice name → prompts contributed


def build_rectification_set(
    slices: Sequence[Slice],
    schema: AttributeSchema,
    templates: Sequence[Template],
    text_embed: TextEmbed,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> RectifySet:
    """Embed every slice's prompt set; each prompt is labeled by its class value."""
    matrices = []
    labels: list[int] = []
    counts: dict[str, int] = {}
    for slc in slices:
        fixed = slc.to_dict()
        marginalized = [] if schema.class_family in fixed else [schema.class_family]
        ps = generate(schema, fixed, marginalized, templates, ensemble, max_ensemble)
        if not len(ps):
            raise RectifyError(f"slice {slc.name} generated no prompts")
        ps_labels = ps.labels()
        if any(l is None for l in ps_labels):
            raise RectifyError(f"slice {slc.name} does not determine a class label")
        matrices.append(embed_all(text_embed, ps.texts()))
        labels.extend(int(l) for l in ps_labels)
        counts[slc.name] = len(ps)
    return RectifySet(matrix=np.vstack(matrices), labels=labels, prompt_counts=counts)


def rectify(
    model: ProbeModel,
    slices: Sequence[Slice],
    schema: AttributeSchema,
    templates: Sequence[Template],
    text_embed: TextEmbed,
    cfg: TrainConfig,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
    from_scratch: bool = False,
    replay_store: EmbeddingStore | None = None,
) -> ProbeModel:
    """Return a new probe continued-trained on the slices' text embeddings.

    The input model is never mutated. With zero epochs the model is
    returned unchanged (a deep copy). ``from_scratch`` re-initializes
    instead of warm-starting (text-only training ablation);
    ``replay_store`` optionally mixes original-modality embeddings back
    into the rectification batch (off by default: rectification normally
    sees only the slice texts).
    """
    if model.task not in ("multiclass", "multilabel"):
        raise RectifyError("rectification requires a multiclass or multilabel model")
    if cfg.epochs == 0:
        return model.copy()
    cfg.validate()
    rect = build_rectification_set(slices, schema, templates, text_embed, ensemble, max_ensemble)

    X = rect.matrix
    labels: list = list(rect.labels)
    closing = model.gap_closing
    if closing is not None:
        text_mean = resolve_text_mean(model, schema, templates, text_embed, ensemble, max_ensemble)
        X = X - text_mean
    if replay_store is not None:
        R = np.asarray(replay_store.matrix, dtype=np.float64)
        if closing is not None:
            mean = closing.get(replay_store.modality)
            R = R - (np.asarray(mean) if mean is not None else R.mean(axis=0))
        if replay_store.meta.labels is None:
            raise RectifyError("replay store has no labels")
        X = np.vstack([X, R])
        labels = labels + list(replay_store.meta.labels)

    if model.task == "multilabel":
        labels = [[l] if not isinstance(l, (list, tuple)) else l for l in labels]
    meta = StoreMeta(labels=labels)
    text_store = EmbeddingStore(matrix=X, modality="text", normalized=False, meta=meta)

    base = model.copy()
    result = train(
        base,
        text_store,
        text_store,  # snapshot selection on the rectification text set
        cfg,
        warm_start=not from_scratch,
    )
    if closing is not None:
        updated = {k: np.asarray(v) for k, v in closing.items()}
        updated.setdefault("text", text_mean)
        result.gap_closing = updated
    return result


@dataclass
class RectifySliceRow:
    name: str
    n_rows: int
    accuracy_before: float | None
    accuracy_after: float | None

    @property
    def delta(self) -> float | None:
        if self.accuracy_before is None or self.accuracy_after is None:
            return None
        return self.accuracy_after - self.accuracy_before

    def to_json_dict(self) -> dict:
        return {
            "slice": self.name,
            "n_rows": self.n_rows,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "delta": self.delta,
        }


@dataclass
class RectifyReport:
    rows: list[RectifySliceRow]
    global_before: float
    global_after: float
    config: dict | None = None

    @property
    def global_delta(self) -> float:
        return self.global_after - self.global_before

    def to_json_dict(self) -> dict:
        return {
            "rows": [r.to_json_dict() for r in self.rows],
            "global_before": self.global_before,
            "global_after": self.global_after,
            "global_delta": self.global_delta,
            "config": self.config,
        }


def _hard_accuracy(model: ProbeModel, store: EmbeddingStore, idx: np.ndarray) -> float | None:
    if idx.size == 0:
        return None
    X = np.asarray(store.matrix, dtype=np.float64)[idx]
    _, hard = predict(model, X, modality=store.modality)
    labels = [store.meta.labels[i] for i in idx]
    if model.task == "multiclass":
        return float(np.mean(np.asarray(hard) == np.asarray([int(l) for l in labels])))
    correct = [
        all((hard[r, c] == 1) == (c in lab) for c in range(model.n_classes))
        for r, lab in enumerate(labels)
    ]
    return float(np.mean(correct))


def compare(
    before: ProbeModel,
    after: ProbeModel,
    eval_store: EmbeddingStore,
    slices: Sequence[Slice],
    schema: AttributeSchema,
    config: dict | None = None,
) -> RectifyReport:
    """Per-slice and global hard accuracy for both models on one store.

    Slices matching zero rows are reported with null accuracies rather
    than dropped, so the before/after slice sets are identical.
    """
    if eval_store.meta.labels is None:
        raise RectifyError("evaluation store has no labels")
    rows = []
    for slc in slices:
        idx = match_slice_rows(eval_store, slc, schema)
        rows.append(
            RectifySliceRow(
                name=slc.name,
                n_rows=int(idx.size),
                accuracy_before=_hard_accuracy(before, eval_store, idx),
                accuracy_after=_hard_accuracy(after, eval_store, idx),
            )
        )
    everything = np.arange(eval_store.n)
    return RectifyReport(
        rows=rows,
        global_before=_hard_accuracy(before, eval_store, everything),
        global_after=_hard_accuracy(after, eval_store, everything),
        config=config,
    )
