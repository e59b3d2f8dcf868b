"""Linear/MLP probes over embeddings: training, prediction, metrics.

Training is first-order with adaptive per-parameter step sizes (Adam-style
moment estimates) at a fixed base learning rate, seeded shuffling, and
best-validation-loss snapshot selection. The quadratic task additionally has
an exact closed-form ridge solver so the transfer guarantee can be checked
against the true minimizer rather than an iterative approximation.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .store import EmbeddingStore, labels_as_multihot

KINDS = ("linear", "mlp")
TASKS = ("multiclass", "multilabel", "quadratic")
ACTIVATIONS = ("none", "relu")

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_PROB_FLOOR = 1e-12


class ProbeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None  # (out,)


@dataclass
class ProbeModel:
    kind: str
    task: str
    activation: str = "none"
    layers: list[Layer] = field(default_factory=list)
    gap_closing: dict[str, np.ndarray] | None = None
    config: dict | None = None
    seed: int | None = None

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ProbeError(f"unknown kind {self.kind!r}")
        if self.task not in TASKS:
            raise ProbeError(f"unknown task {self.task!r}")
        if self.activation not in ACTIVATIONS:
            raise ProbeError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ProbeError("model has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ProbeError(
                    f"layer dimensions do not chain: {a.weight.shape} then {b.weight.shape}"
                )
        if self.task == "quadratic":
            if self.kind != "linear" or len(self.layers) != 1 or self.layers[0].bias is not None:
                raise ProbeError("quadratic task requires a single bias-free linear layer")

    def copy(self) -> "ProbeModel":
        return copy.deepcopy(self)


def linear_probe(d: int, n_classes: int, task: str = "multiclass") -> ProbeModel:
    bias = None if task == "quadratic" else np.zeros(n_classes)
    return ProbeModel(
        kind="linear",
        task=task,
        activation="none",
        layers=[Layer(weight=np.zeros((n_classes, d)), bias=bias)],
    )


def mlp_probe(d: int, n_classes: int, hidden: int | None = None, task: str = "multiclass") -> ProbeModel:
    if task == "quadratic":
        raise ProbeError("quadratic task requires a linear model")
    h = d if hidden is None else hidden
    return ProbeModel(
        kind="mlp",
        task=task,
        activation="relu",
        layers=[
            Layer(weight=np.zeros((h, d)), bias=np.zeros(h)),
            Layer(weight=np.zeros((n_classes, h)), bias=np.zeros(n_classes)),
        ],
    )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 25
    batch_size: int = 256
    seed: int = 0
    ridge_lambda: float = 1e-3
    model_selection: str = "best_val_loss"

    def validate(self, min_epochs: int = 1) -> None:
        if self.learning_rate <= 0:
            raise ProbeError("learning_rate must be > 0")
        if self.epochs < min_epochs:
            raise ProbeError(f"epochs must be ≥ {min_epochs}, got {self.epochs}")
        if self.batch_size < 1:
            raise ProbeError("batch_size must be ≥ 1")
        if self.ridge_lambda <= 0:
            raise ProbeError("ridge_lambda must be > 0")
        if self.model_selection != "best_val_loss":
            raise ProbeError(f"unknown model_selection {self.model_selection!r}")

    def to_json_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "ridge_lambda": self.ridge_lambda,
            "model_selection": self.model_selection,
        }


def balanced_targets(labels: Sequence[int], class_distribution: np.ndarray) -> np.ndarray:
    """Targets one-hot(label) − class_distribution, one row per label."""
    dist = np.asarray(class_distribution, dtype=np.float64)
    if abs(float(dist.sum()) - 1.0) > 1e-9:
        raise ProbeError(f"class distribution sums to {dist.sum()!r}, expected 1")
    n_classes = dist.shape[0]
    out = np.tile(-dist, (len(labels), 1))
    for i, lab in enumerate(labels):
        c = int(lab)
        if not (0 <= c < n_classes):
            raise ProbeError(f"label {c} at row {i} outside [0, {n_classes})")
        out[i, c] += 1.0
    return out


def empirical_distribution(labels: Sequence[int], n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def ridge_fit(X: np.ndarray, T: np.ndarray, ridge_lambda: float) -> ProbeModel:
    """Exact minimizer of (1/n)Σ‖Wx_i − t_i‖² + λ‖W‖²_F.

    Solves the normal equations W(XᵀX/n + λI) = TᵀX/n; λ > 0 makes the
    system positive definite and the minimizer unique.
    """
    if ridge_lambda <= 0:
        raise ProbeError("ridge_lambda must be > 0")
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if X.shape[0] != T.shape[0]:
        raise ProbeError(f"row mismatch: X has {X.shape[0]}, targets have {T.shape[0]}")
    if not (np.isfinite(X).all() and np.isfinite(T).all()):
        raise ProbeError("non-finite inputs")
    n, d = X.shape
    A = X.T @ X / n + ridge_lambda * np.eye(d)
    B = X.T @ T / n
    W = np.linalg.solve(A, B).T
    model = ProbeModel(kind="linear", task="quadratic", activation="none", layers=[Layer(weight=W)])
    model.validate()
    return model


def quadratic_loss(model: ProbeModel, X: np.ndarray, labels: Sequence[int], class_distribution: np.ndarray) -> float:
    """Mean squared norm ‖Wx − ẽ_c‖² over rows (data term only, no penalty)."""
    T = balanced_targets(labels, class_distribution)
    scores = _forward(model, np.asarray(X, dtype=np.float64))[-1]
    return float(np.mean(np.sum((scores - T) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# forward / backward / losses


def _forward(model: ProbeModel, X: np.ndarray) -> list[np.ndarray]:
    """Activations per layer; [-1] is the final logit/score matrix."""
    acts = [X]
    h = X
    for i, layer in enumerate(model.layers):
        z = h @ layer.weight.T
        if layer.bias is not None:
            z = z + layer.bias
        if i < len(model.layers) - 1 and model.activation == "relu":
            z = np.maximum(z, 0.0)
        acts.append(z)
        h = z
    return acts


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _loss_and_grad(model: ProbeModel, z: np.ndarray, targets: np.ndarray, ridge_lambda: float) -> tuple[float, np.ndarray]:
    """Task loss and its gradient w.r.t. the final pre-activation z.

    The quadratic task's training loss carries the λ‖W‖²_F penalty (the
    penalty gradient is added to the weight gradient by the caller); the
    other tasks are unpenalized.
    """
    n = z.shape[0]
    if model.task == "multiclass":
        p = softmax(z)
        loss = float(-np.mean(np.log(np.clip(p[np.arange(n), targets.astype(int)], _PROB_FLOOR, None))))
        grad = p.copy()
        grad[np.arange(n), targets.astype(int)] -= 1.0
        return loss, grad / n
    if model.task == "multilabel":
        p = sigmoid(z)
        cells = n * z.shape[1]
        pc = np.clip(p, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        loss = float(-np.mean(targets * np.log(pc) + (1.0 - targets) * np.log(1.0 - pc)))
        return loss, (p - targets) / cells
    # quadratic
    diff = z - targets
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    loss += ridge_lambda * float(sum(np.sum(l.weight**2) for l in model.layers))
    return loss, 2.0 * diff / n


def _backward(model: ProbeModel, acts: list[np.ndarray], grad_z: np.ndarray, ridge_lambda: float) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Gradients per layer, matching the structure of model.layers."""
    grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * len(model.layers)  # type: ignore[list-item]
    delta = grad_z
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        inp = acts[i]
        gw = delta.T @ inp
        if model.task == "quadratic":
            gw = gw + 2.0 * ridge_lambda * layer.weight
        gb = delta.sum(axis=0) if layer.bias is not None else None
        grads[i] = (gw, gb)
        if i > 0:
            delta = delta @ layer.weight
            if model.activation == "relu":
                delta = delta * (acts[i] > 0)
    return grads


def batch_loss(model: ProbeModel, X: np.ndarray, targets: np.ndarray, ridge_lambda: float = 1e-3) -> float:
    z = _forward(model, X)[-1]
    return _loss_and_grad(model, z, targets, ridge_lambda)[0]


def loss_gradients(model: ProbeModel, X: np.ndarray, targets: np.ndarray, ridge_lambda: float = 1e-3):
    """Analytic parameter gradients of the training loss (for checking)."""
    acts = _forward(model, X)
    loss, grad_z = _loss_and_grad(model, acts[-1], targets, ridge_lambda)
    return loss, _backward(model, acts, grad_z, ridge_lambda)


def _prepare_targets(
    task: str, labels: list, n_classes: int, class_distribution: np.ndarray | None = None
) -> np.ndarray:
    if task == "multiclass":
        return np.asarray([int(l) for l in labels], dtype=np.int64)
    if task == "multilabel":
        if not all(isinstance(l, (list, tuple)) for l in labels):
            raise ProbeError("multilabel task requires index-set labels")
        return labels_as_multihot(labels, n_classes)
    # quadratic: balanced targets against the training-label distribution
    if class_distribution is None:
        class_distribution = empirical_distribution([int(l) for l in labels], n_classes)
    return balanced_targets([int(l) for l in labels], class_distribution)


def _init_layers(model: ProbeModel, rng: np.random.Generator) -> None:
    # hidden layers break symmetry; the output layer starts at zero logits
    for i, layer in enumerate(model.layers):
        out, inp = layer.weight.shape
        if i < len(model.layers) - 1:
            limit = math.sqrt(6.0 / (inp + out))
            layer.weight = rng.uniform(-limit, limit, size=(out, inp))
        else:
            layer.weight = np.zeros((out, inp))
        if layer.bias is not None:
            layer.bias = np.zeros(out)


def train(
    spec: ProbeModel,
    train_store: EmbeddingStore,
    val_store: EmbeddingStore,
    cfg: TrainConfig,
    *,
    close_gap: bool = False,
    warm_start: bool = False,
    train_targets: np.ndarray | None = None,
    val_targets: np.ndarray | None = None,
) -> ProbeModel:
    """Train a probe, returning the epoch snapshot with lowest validation loss.

    Shuffling and initialization derive from cfg.seed, so identical inputs
    give byte-identical serialized models. With ``close_gap`` the training
    matrix is centered first and the subtracted mean is recorded on the
    model under the training store's modality; the validation matrix is
    centered with the same mean. ``warm_start`` continues from the spec's
    current weights instead of re-initializing (used for rectification).
    """
    cfg.validate()
    spec.validate()
    model = spec.copy()
    rng = np.random.default_rng(cfg.seed)
    if not warm_start:
        _init_layers(model, rng)

    X = np.asarray(train_store.matrix, dtype=np.float64)
    Xv = np.asarray(val_store.matrix, dtype=np.float64)
    if close_gap:
        if train_store.modality not in ("image", "text"):
            raise ProbeError("gap closing requires an image or text training store")
        mean = X.mean(axis=0)
        X = X - mean
        Xv = Xv - mean
        closing = dict(model.gap_closing or {})
        closing[train_store.modality] = mean
        model.gap_closing = closing

    n_classes = model.n_classes
    train_dist = None
    if model.task == "quadratic" and train_store.meta.labels is not None:
        train_dist = empirical_distribution([int(l) for l in train_store.meta.labels], n_classes)
    if train_targets is None:
        if train_store.meta.labels is None:
            raise ProbeError("training store has no labels")
        train_targets = _prepare_targets(model.task, train_store.meta.labels, n_classes, train_dist)
    if val_targets is None:
        if val_store.meta.labels is None:
            raise ProbeError("validation store has no labels")
        val_targets = _prepare_targets(model.task, val_store.meta.labels, n_classes, train_dist)

    n = X.shape[0]
    state = [
        (np.zeros_like(l.weight), np.zeros_like(l.weight), np.zeros(l.bias.shape) if l.bias is not None else None,
         np.zeros(l.bias.shape) if l.bias is not None else None)
        for l in model.layers
    ]
    step = 0
    best: tuple[float, ProbeModel] | None = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            acts = _forward(model, X[idx])
            loss, grad_z = _loss_and_grad(model, acts[-1], train_targets[idx], cfg.ridge_lambda)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            grads = _backward(model, acts, grad_z, cfg.ridge_lambda)
            step += 1
            bc1 = 1.0 - _ADAM_B1**step
            bc2 = 1.0 - _ADAM_B2**step
            for layer, grad, st in zip(model.layers, grads, state):
                mw, vw, mb, vb = st
                gw, gb = grad
                mw *= _ADAM_B1
                mw += (1 - _ADAM_B1) * gw
                vw *= _ADAM_B2
                vw += (1 - _ADAM_B2) * gw**2
                layer.weight = layer.weight - cfg.learning_rate * (mw / bc1) / (np.sqrt(vw / bc2) + _ADAM_EPS)
                if gb is not None:
                    mb *= _ADAM_B1
                    mb += (1 - _ADAM_B1) * gb
                    vb *= _ADAM_B2
                    vb += (1 - _ADAM_B2) * gb**2
                    layer.bias = layer.bias - cfg.learning_rate * (mb / bc1) / (np.sqrt(vb / bc2) + _ADAM_EPS)
        val_loss = batch_loss(model, Xv, val_targets, cfg.ridge_lambda)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss after epoch {epoch}")
        if best is None or val_loss < best[0]:
            best = (val_loss, model.copy())

    assert best is not None
    result = best[1]
    result.config = cfg.to_json_dict()
    result.seed = cfg.seed
    return result


# ---------------------------------------------------------------------------
# prediction and metrics


def resolve_input(
    model: ProbeModel,
    X: np.ndarray,
    modality: str | None = None,
    modality_mean: np.ndarray | None = None,
) -> np.ndarray:
    """Apply the model's gap-closing convention to raw inputs.

    When the model records gap-closing means, the caller must designate the
    input modality; the recorded mean for that modality is subtracted. If no
    mean was recorded for it, an explicit ``modality_mean`` or, failing
    that, the input's own column mean is used (evaluation-time stores are
    centered by their own modality mean).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ProbeError(f"input has shape {X.shape}, model expects n×{model.in_dim}")
    if model.gap_closing is None:
        return X
    if modality is None:
        raise ProbeError("model records gap-closing means; caller must designate the input modality")
    if modality in model.gap_closing:
        return X - np.asarray(model.gap_closing[modality], dtype=np.float64)
    if modality_mean is not None:
        return X - np.asarray(modality_mean, dtype=np.float64)
    return X - X.mean(axis=0)


def predict(
    model: ProbeModel,
    X: np.ndarray,
    modality: str | None = None,
    modality_mean: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Scores and hard predictions.

    multiclass → softmax probabilities, argmax (ties to the lowest index);
    multilabel → per-label sigmoid, threshold 0.5 with 0.5 counted positive;
    quadratic → raw scores, argmax.
    """
    model.validate()
    X = resolve_input(model, X, modality, modality_mean)
    z = _forward(model, X)[-1]
    if model.task == "multiclass":
        scores = softmax(z)
        return scores, np.argmax(scores, axis=1)
    if model.task == "multilabel":
        scores = sigmoid(z)
        return scores, (scores >= 0.5).astype(np.int64)
    return z, np.argmax(z, axis=1)


@dataclass
class EvalReport:
    loss: float
    micro_f1: float
    macro_f1: float
    accuracy: float
    per_class: list[tuple[float, float, float, int]]

    def to_json_dict(self) -> dict:
        return {
            "loss": self.loss,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": [
                {"precision": p, "recall": r, "f1": f, "support": s} for p, r, f, s in self.per_class
            ],
        }


def _f1_from_counts(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def metrics(
    scores: np.ndarray,
    hard: np.ndarray,
    labels: list,
    task: str,
    class_distribution: np.ndarray | None = None,
) -> EvalReport:
    """Micro/macro F1 from pooled confusion counts, plus the task loss.

    Multilabel accuracy is the fraction of correct example×label cells;
    multiclass accuracy is exact-match. 0/0 ratios are defined as 0.
    """
    n_classes = scores.shape[1]
    if task == "multilabel":
        y = labels_as_multihot(labels, n_classes)
        pred = np.asarray(hard)
        pc = np.clip(scores, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
        accuracy = float(np.mean(pred == y))
        pos_pred, pos_true = pred == 1, y == 1
    elif task in ("multiclass", "quadratic"):
        y_idx = np.asarray([int(l) for l in labels], dtype=np.int64)
        pred_idx = np.asarray(hard, dtype=np.int64)
        if task == "multiclass":
            n = scores.shape[0]
            loss = float(-np.mean(np.log(np.clip(scores[np.arange(n), y_idx], _PROB_FLOOR, None))))
        else:
            dist = (
                np.asarray(class_distribution, dtype=np.float64)
                if class_distribution is not None
                else empirical_distribution(y_idx, n_classes)
            )
            T = balanced_targets(y_idx, dist)
            loss = float(np.mean(np.sum((scores - T) ** 2, axis=1)))
        accuracy = float(np.mean(pred_idx == y_idx))
        eye = np.eye(n_classes, dtype=bool)
        pos_pred, pos_true = eye[pred_idx], eye[y_idx]
    else:
        raise ProbeError(f"unknown task {task!r}")

    per_class = []
    total_tp = total_fp = total_fn = 0.0
    macro = 0.0
    for c in range(n_classes):
        tp = float(np.sum(pos_pred[:, c] & pos_true[:, c]))
        fp = float(np.sum(pos_pred[:, c] & ~pos_true[:, c]))
        fn = float(np.sum(~pos_pred[:, c] & pos_true[:, c]))
        p, r, f1 = _f1_from_counts(tp, fp, fn)
        per_class.append((p, r, f1, int(np.sum(pos_true[:, c]))))
        macro += f1
        total_tp += tp
        total_fp += fp
        total_fn += fn
    _, _, micro = _f1_from_counts(total_tp, total_fp, total_fn)
    return EvalReport(
        loss=loss,
        micro_f1=micro,
        macro_f1=macro / n_classes,
        accuracy=accuracy,
        per_class=per_class,
    )


def consistency(hard_a: np.ndarray, hard_b: np.ndarray) -> float:
    """Fraction of agreeing predictions: cells for multilabel matrices,
    examples for multiclass vectors."""
    a = np.asarray(hard_a)
    b = np.asarray(hard_b)
    if a.shape != b.shape:
        raise ProbeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


# ---------------------------------------------------------------------------
# serialization


def save_model(model: ProbeModel, path: str | Path) -> None:
    model.validate()
    layers = []
    for layer in model.layers:
        entry = {
            "rows": layer.weight.shape[0],
            "cols": layer.weight.shape[1],
            "weights": [float(v) for v in layer.weight.ravel(order="C")],
        }
        if layer.bias is not None:
            entry["bias"] = [float(v) for v in layer.bias]
        layers.append(entry)
    payload = {
        "kind": model.kind,
        "task": model.task,
        "activation": model.activation,
        "layers": layers,
        "gap_closing": (
            {k: [float(v) for v in vec] for k, vec in model.gap_closing.items()}
            if model.gap_closing is not None
            else None
        ),
        "config": model.config,
        "seed": model.seed,
    }
    text = json.dumps(payload, indent=2) + "\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def load_model(path: str | Path) -> ProbeModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    layers = []
    for entry in obj["layers"]:
        weight = np.asarray(entry["weights"], dtype=np.float64).reshape(entry["rows"], entry["cols"])
        bias = np.asarray(entry["bias"], dtype=np.float64) if "bias" in entry and entry["bias"] is not None else None
        layers.append(Layer(weight=weight, bias=bias))
    gap_closing = obj.get("gap_closing")
    model = ProbeModel(
        kind=obj["kind"],
        task=obj["task"],
        activation=obj["activation"],
        layers=layers,
        gap_closing=(
            {k: np.asarray(v, dtype=np.float64) for k, v in gap_closing.items()} if gap_closing else None
        ),
        config=obj.get("config"),
        seed=obj.get("seed"),
    )
    model.validate()
    return model
