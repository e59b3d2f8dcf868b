"""Error-slice discovery, attribute influence, and text↔image correlation.

A slice is a partial attribute assignment. For each slice we generate
prompts (the class family stays fixed or marginalized so every prompt has a
label), embed them, and score the model: the proxy score is the mean
predicted probability of each prompt's own class, a text-side stand-in for
image accuracy on the slice.

Attribute influence is the Shapley value of the token's family in a
cooperative game whose players are the non-class families: a coalition's
value v(F) is the mean predicted class probability over prompts where the
analyzed family (if in F) is fixed to the token, the other coalition
families are marginalized over their values, and families outside F are
absent. Absence is realized by optional template blocks dropping.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .probe import ProbeModel, predict
from .prompts import AttributeSchema, Template, generate
from .store import EmbeddingStore

TextEmbed = Callable[[str], np.ndarray]

DEFAULT_SLICE_DELTA = 0.10
DEFAULT_MERGE_EPSILON = 0.02
DEFAULT_INFLUENCE_THRESHOLD = 0.05
EXACT_PLAYER_CAP = 12


class DiagnoseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embedding plumbing


def embed_all(text_embed: TextEmbed, prompts: Sequence[str]) -> np.ndarray:
    missing = []
    rows = []
    for p in prompts:
        try:
            rows.append(np.asarray(text_embed(p), dtype=np.float64))
        except KeyError:
            missing.append(p)
    if missing:
        shown = "\n  ".join(missing[:20])
        more = "" if len(missing) <= 20 else f"\n  ... and {len(missing) - 20} more"
        raise DiagnoseError(f"{len(missing)} prompts missing from the text store:\n  {shown}{more}")
    return np.stack(rows)


def store_text_embed(store: EmbeddingStore) -> TextEmbed:
    """Look up prompt embeddings by exact prompt string in a text store."""
    if store.meta.ids is None:
        raise DiagnoseError("text store has no ids; prompt lookup requires prompt-string ids")
    index = {pid: i for i, pid in enumerate(store.meta.ids)}
    matrix = np.asarray(store.matrix, dtype=np.float64)

    def lookup(prompt: str) -> np.ndarray:
        i = index.get(prompt)
        if i is None:
            raise KeyError(prompt)
        return matrix[i]

    return lookup


def corpus_text_mean(
    schema: AttributeSchema,
    templates: Sequence[Template],
    text_embed: TextEmbed,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> np.ndarray:
    """Mean embedding of the full prompt corpus (all families marginalized).

    Used as the text-modality mean for gap-closed models when no explicit
    mean is recorded: it approximates the text distribution's center and is
    independent of which slices are being scored.
    """
    ps = generate(
        schema,
        fixed={},
        marginalized=list(schema.family_names()),
        templates=templates,
        ensemble=ensemble,
        max_ensemble=max_ensemble,
    )
    return embed_all(text_embed, ps.texts()).mean(axis=0)


def resolve_text_mean(
    model: ProbeModel,
    schema: AttributeSchema,
    templates: Sequence[Template],
    text_embed: TextEmbed,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> np.ndarray | None:
    if model.gap_closing is None:
        return None
    recorded = model.gap_closing.get("text")
    if recorded is not None:
        return np.asarray(recorded, dtype=np.float64)
    return corpus_text_mean(schema, templates, text_embed, ensemble, max_ensemble)


# ---------------------------------------------------------------------------
# slices


@dataclass(frozen=True)
class Slice:
    assignment: tuple[tuple[str, str], ...]

    @classmethod
    def from_mapping(cls, schema: AttributeSchema, assignment: Mapping[str, str]) -> "Slice":
        if not assignment:
            raise DiagnoseError("a slice must assign at least one family")
        for name, value in assignment.items():
            if value not in schema.family_values(name):
                raise DiagnoseError(f"slice value {value!r} not in family {name!r}")
        ordered = tuple((name, assignment[name]) for name in schema.family_names() if name in assignment)
        return cls(assignment=ordered)

    @property
    def name(self) -> str:
        return ",".join(f"{fam}={val}" for fam, val in self.assignment)

    def to_dict(self) -> dict[str, str]:
        return dict(self.assignment)

    def is_subset_of(self, other: "Slice") -> bool:
        return set(self.assignment) < set(other.assignment)


def enumerate_slices(schema: AttributeSchema, max_slices: int = 512) -> list[Slice]:
    """All value assignments over all non-empty family subsets, schema order."""
    names = schema.family_names()
    slices: list[Slice] = []
    for r in range(1, len(names) + 1):
        for subset in itertools.combinations(names, r):
            for combo in itertools.product(*(schema.family_values(f) for f in subset)):
                slices.append(Slice(assignment=tuple(zip(subset, combo))))
                if len(slices) > max_slices:
                    raise DiagnoseError(
                        f"schema enumerates more than {max_slices} slices; pass an explicit slice list"
                    )
    return slices


@dataclass
class SliceRow:
    slice: Slice
    n_text_prompts: int
    proxy_score: float
    text_accuracy: float
    image_n: int | None = None
    image_accuracy: float | None = None
    is_error: bool | None = None

    def to_json_dict(self) -> dict:
        return {
            "slice": self.slice.name,
            "assignment": self.slice.to_dict(),
            "n_text_prompts": self.n_text_prompts,
            "proxy_score": self.proxy_score,
            "text_accuracy": self.text_accuracy,
            "image_n": self.image_n,
            "image_accuracy": self.image_accuracy,
            "is_error": self.is_error,
        }


@dataclass
class SliceReport:
    rows: list[SliceRow]
    global_error: float | None = None

    def mean_proxy(self) -> float:
        return float(np.mean([r.proxy_score for r in self.rows]))

    def to_json_dict(self) -> dict:
        return {
            "rows": [r.to_json_dict() for r in self.rows],
            "global_error": self.global_error,
            "mean_proxy": self.mean_proxy() if self.rows else None,
        }


def _own_class_probability(scores: np.ndarray, hard: np.ndarray, labels: Sequence[int], task: str):
    idx = np.asarray(labels, dtype=int)
    n = np.arange(len(idx))
    prob = scores[n, idx]
    if task == "multiclass":
        correct = np.asarray(hard, dtype=int) == idx
    else:  # multilabel: correctness of the prompt's own label cell
        correct = np.asarray(hard)[n, idx] == 1
    return prob, correct


def match_slice_rows(store: EmbeddingStore, slc: Slice, schema: AttributeSchema) -> np.ndarray:
    """Indices of store rows whose metadata matches the slice exactly.

    The class family can match through the attribute table or, failing
    that, through the label column.
    """
    mask = np.ones(store.n, dtype=bool)
    attrs = store.meta.attributes or {}
    for fam, val in slc.assignment:
        if fam in attrs:
            mask &= np.asarray([v == val for v in attrs[fam]])
        elif fam == schema.class_family and store.meta.labels is not None:
            target = schema.value_to_label()[val]
            mask &= np.asarray(
                [
                    (target in lab) if isinstance(lab, (list, tuple)) else (lab == target)
                    for lab in store.meta.labels
                ]
            )
        else:
            raise DiagnoseError(f"image store has no metadata for family {fam!r}")
    return np.nonzero(mask)[0]


def slice_eval(
    model: ProbeModel,
    text_embed: TextEmbed,
    schema: AttributeSchema,
    templates: Sequence[Template],
    slices: Sequence[Slice],
    image_store: EmbeddingStore | None = None,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> SliceReport:
    """Score each slice on generated text prompts (and matched image rows).

    A slice that fixes the class family keeps it fixed; otherwise the class
    family is marginalized and each prompt is labeled by its own class
    value. Rows come back sorted ascending by proxy score.
    """
    if model.task not in ("multiclass", "multilabel"):
        raise DiagnoseError("slice evaluation requires a multiclass or multilabel model")
    text_mean = resolve_text_mean(model, schema, templates, text_embed, ensemble, max_ensemble)

    rows = []
    for slc in slices:
        fixed = slc.to_dict()
        marginalized = [] if schema.class_family in fixed else [schema.class_family]
        ps = generate(schema, fixed, marginalized, templates, ensemble, max_ensemble)
        if not len(ps):
            raise DiagnoseError(f"slice {slc.name} generated no prompts")
        labels = ps.labels()
        if any(l is None for l in labels):
            raise DiagnoseError(f"slice {slc.name} produced unlabeled prompts")
        X = embed_all(text_embed, ps.texts())
        scores, hard = predict(model, X, modality="text", modality_mean=text_mean)
        prob, correct = _own_class_probability(scores, hard, labels, model.task)
        row = SliceRow(
            slice=slc,
            n_text_prompts=len(ps),
            proxy_score=float(prob.mean()),
            text_accuracy=float(correct.mean()),
        )
        if image_store is not None:
            idx = match_slice_rows(image_store, slc, schema)
            row.image_n = int(idx.size)
            row.image_accuracy = (
                _image_accuracy(model, image_store, idx, schema) if idx.size else None
            )
        rows.append(row)

    global_error = None
    if image_store is not None:
        all_idx = np.arange(image_store.n)
        global_error = 1.0 - _image_accuracy(model, image_store, all_idx, schema)
    rows.sort(key=lambda r: (r.proxy_score, r.slice.name))
    return SliceReport(rows=rows, global_error=global_error)


def _image_accuracy(model: ProbeModel, store: EmbeddingStore, idx: np.ndarray, schema: AttributeSchema) -> float:
    if store.meta.labels is None:
        raise DiagnoseError("image store has no labels")
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


def discover(
    report: SliceReport,
    top_k: int = 20,
    threshold_delta: float = DEFAULT_SLICE_DELTA,
    merge: bool = False,
    merge_epsilon: float = DEFAULT_MERGE_EPSILON,
) -> list[SliceRow]:
    """Rank slices ascending by proxy score and flag error slices.

    A slice is an error slice when its proxy sits at least
    ``threshold_delta`` below the mean proxy over all slices. With
    ``merge``, a finer slice is pruned when some coarser slice (a strict
    subset assignment) scores within ``merge_epsilon`` of it.
    """
    if not report.rows:
        raise DiagnoseError("empty slice report")
    mean_proxy = report.mean_proxy()
    rows = [replace(r) for r in report.rows]
    if merge:
        kept = []
        for row in rows:
            absorbed = any(
                other.slice.is_subset_of(row.slice)
                and abs(other.proxy_score - row.proxy_score) <= merge_epsilon
                for other in rows
            )
            if not absorbed:
                kept.append(row)
        rows = kept
    for row in rows:
        row.is_error = bool(row.proxy_score <= mean_proxy - threshold_delta)
    rows.sort(key=lambda r: (r.proxy_score, r.slice.name))
    return rows[:top_k]


# ---------------------------------------------------------------------------
# Shapley influence


class _Characteristic:
    """Memoized coalition-value evaluator for one target class."""

    def __init__(
        self,
        model: ProbeModel,
        schema: AttributeSchema,
        templates: Sequence[Template],
        text_embed: TextEmbed,
        class_index: int,
        ensemble: Sequence[str] | None,
        max_ensemble: int | None,
        text_mean: np.ndarray | None,
    ):
        if model.task not in ("multiclass", "multilabel"):
            raise DiagnoseError("influence analysis requires a multiclass or multilabel model")
        self.model = model
        self.schema = schema
        self.templates = templates
        self.text_embed = text_embed
        self.class_index = class_index
        self.ensemble = ensemble
        self.max_ensemble = max_ensemble
        self.text_mean = text_mean
        self._cache: dict[tuple, float] = {}

    def value(self, fixed: Mapping[str, str], marginalized: Sequence[str]) -> float:
        key = (tuple(sorted(fixed.items())), tuple(sorted(marginalized)))
        if key not in self._cache:
            ps = generate(
                self.schema,
                fixed,
                [self.schema.class_family, *marginalized],
                self.templates,
                self.ensemble,
                self.max_ensemble,
            )
            X = embed_all(self.text_embed, ps.texts())
            scores, _ = predict(self.model, X, modality="text", modality_mean=self.text_mean)
            self._cache[key] = float(scores[:, self.class_index].mean())
        return self._cache[key]


def _players(schema: AttributeSchema) -> list[str]:
    return [name for name in schema.family_names() if name != schema.class_family]


def _marginal_pair(
    char: _Characteristic,
    coalition: Sequence[str],
    family: str,
    token: str,
    coalition_tokens: Mapping[str, str] | None,
) -> float:
    """v(coalition ∪ {family=token}) − v(coalition).

    Coalition families are marginalized unless ``coalition_tokens`` pins
    them to fixed values.
    """
    base_fixed: dict[str, str] = {}
    base_marg: list[str] = []
    for other in coalition:
        if coalition_tokens is not None and other in coalition_tokens:
            base_fixed[other] = coalition_tokens[other]
        else:
            base_marg.append(other)
    with_fixed = dict(base_fixed)
    with_fixed[family] = token
    return char.value(with_fixed, base_marg) - char.value(base_fixed, base_marg)


def _make_characteristic(
    model: ProbeModel,
    schema: AttributeSchema,
    templates: Sequence[Template],
    class_index: int,
    text_embed: TextEmbed,
    ensemble: Sequence[str] | None,
    max_ensemble: int | None,
) -> _Characteristic:
    text_mean = resolve_text_mean(model, schema, templates, text_embed, ensemble, max_ensemble)
    return _Characteristic(
        model, schema, templates, text_embed, class_index, ensemble, max_ensemble, text_mean
    )


def shapley_exact(
    model: ProbeModel,
    schema: AttributeSchema,
    templates: Sequence[Template],
    class_index: int,
    family: str,
    token: str,
    text_embed: TextEmbed,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
    coalition_tokens: Mapping[str, str] | None = None,
    player_cap: int = EXACT_PLAYER_CAP,
    _characteristic: _Characteristic | None = None,
) -> float:
    """Exact Shapley value of ``family`` (carrying ``token``) for a class.

    Sums |F|!·(|P|−|F|−1)!/|P|! weighted marginal contributions over all
    coalitions F of the other players. By default coalition families are
    marginalized over their values; ``coalition_tokens`` pins chosen
    families to fixed tokens instead, which makes the game common across
    players (the mode under which the efficiency identity holds).
    """
    if token not in schema.family_values(family):
        raise DiagnoseError(f"token {token!r} not in family {family!r}")
    if family == schema.class_family:
        raise DiagnoseError("the class family is not a player")
    players = _players(schema)
    if len(players) > player_cap:
        raise DiagnoseError(
            f"{len(players)} players exceed the exact-mode cap {player_cap}; use shapley_mc"
        )
    char = _characteristic or _make_characteristic(
        model, schema, templates, class_index, text_embed, ensemble, max_ensemble
    )
    others = [p for p in players if p != family]
    p_count = len(players)
    total = 0.0
    for r in range(len(others) + 1):
        weight = math.factorial(r) * math.factorial(p_count - r - 1) / math.factorial(p_count)
        for coalition in itertools.combinations(others, r):
            total += weight * _marginal_pair(char, coalition, family, token, coalition_tokens)
    return total


def shapley_mc(
    model: ProbeModel,
    schema: AttributeSchema,
    templates: Sequence[Template],
    class_index: int,
    family: str,
    token: str,
    text_embed: TextEmbed,
    permutations: int,
    seed: int,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
    coalition_tokens: Mapping[str, str] | None = None,
    _characteristic: _Characteristic | None = None,
) -> tuple[float, float]:
    """Monte-Carlo Shapley estimate over uniform player permutations.

    Returns (mean marginal contribution, standard error); coalition values
    are memoized so repeated permutations cost nothing extra.
    """
    if permutations < 1:
        raise DiagnoseError("permutations must be ≥ 1")
    if token not in schema.family_values(family):
        raise DiagnoseError(f"token {token!r} not in family {family!r}")
    players = _players(schema)
    char = _characteristic or _make_characteristic(
        model, schema, templates, class_index, text_embed, ensemble, max_ensemble
    )
    others = [p for p in players if p != family]
    rng = np.random.default_rng(seed)
    contribs = np.empty(permutations)
    for t in range(permutations):
        permuted = [players[i] for i in rng.permutation(len(players))]
        coalition = permuted[: permuted.index(family)]
        contribs[t] = _marginal_pair(char, coalition, family, token, coalition_tokens)
    mean = float(contribs.mean())
    stderr = float(contribs.std(ddof=1) / math.sqrt(permutations)) if permutations > 1 else 0.0
    return mean, stderr


@dataclass
class InfluenceRow:
    class_name: str
    family: str
    token: str
    influence: float
    stderr: float | None = None
    influential: bool | None = None

    def to_json_dict(self) -> dict:
        return {
            "class": self.class_name,
            "family": self.family,
            "token": self.token,
            "influence": self.influence,
            "stderr": self.stderr,
            "influential": self.influential,
        }


@dataclass
class InfluenceReport:
    rows: list[InfluenceRow]
    method: str  # "exact" | "monte_carlo"
    permutations: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "rows": [r.to_json_dict() for r in self.rows],
            "method": self.method,
            "permutations": self.permutations,
        }


def influence_report(
    model: ProbeModel,
    schema: AttributeSchema,
    templates: Sequence[Template],
    class_name: str,
    text_embed: TextEmbed,
    method: str = "exact",
    permutations: int = 10_000,
    seed: int = 0,
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
    threshold: float = DEFAULT_INFLUENCE_THRESHOLD,
) -> InfluenceReport:
    """Influence of every non-class token on the named class."""
    mapping = schema.value_to_label()
    if class_name in mapping:
        class_index = mapping[class_name]
    elif class_name in schema.class_values:
        class_index = schema.class_values.index(class_name)
    else:
        raise DiagnoseError(f"unknown class {class_name!r}")
    char = _make_characteristic(
        model, schema, templates, class_index, text_embed, ensemble, max_ensemble
    )
    rows = []
    for family in _players(schema):
        for token in schema.family_values(family):
            if method == "exact":
                value = shapley_exact(
                    model, schema, templates, class_index, family, token, text_embed,
                    ensemble, max_ensemble, _characteristic=char,
                )
                stderr = None
            elif method == "monte_carlo":
                value, stderr = shapley_mc(
                    model, schema, templates, class_index, family, token, text_embed,
                    permutations, seed, ensemble, max_ensemble, _characteristic=char,
                )
            else:
                raise DiagnoseError(f"unknown method {method!r}")
            rows.append(
                InfluenceRow(
                    class_name=class_name,
                    family=family,
                    token=token,
                    influence=value,
                    stderr=stderr,
                    influential=bool(abs(value) >= threshold),
                )
            )
    return InfluenceReport(
        rows=rows,
        method=method,
        permutations=permutations if method == "monte_carlo" else None,
    )


# ---------------------------------------------------------------------------
# correlation


@dataclass
class CorrelationReport:
    spearman: float | None
    pearson: float | None
    n_slices: int
    pairing: list[tuple[str, float, float]]

    def to_json_dict(self) -> dict:
        return {
            "spearman": self.spearman,
            "pearson": self.pearson,
            "n_slices": self.n_slices,
            "pairing": [
                {"slice": name, "text_score": t, "image_score": i} for name, t, i in self.pairing
            ],
        }


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; ties share the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc**2)) * float(np.sum(yc**2)))
    if denom == 0.0:
        return None
    return float(np.sum(xc * yc) / denom)


def correlate(
    text_scores: Sequence[float],
    image_scores: Sequence[float],
    names: Sequence[str] | None = None,
) -> CorrelationReport:
    """Pearson on raw values, Spearman as Pearson on average ranks."""
    x = np.asarray(text_scores, dtype=np.float64)
    y = np.asarray(image_scores, dtype=np.float64)
    if x.shape != y.shape:
        raise DiagnoseError(f"score vectors differ in length: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise DiagnoseError("correlation needs at least 3 aligned slices")
    pearson = _pearson(x, y)
    spearman = _pearson(average_ranks(x), average_ranks(y))
    labels = list(names) if names is not None else [f"slice_{i}" for i in range(x.size)]
    return CorrelationReport(
        spearman=spearman,
        pearson=pearson,
        n_slices=int(x.size),
        pairing=[(labels[i], float(x[i]), float(y[i])) for i in range(x.size)],
    )
