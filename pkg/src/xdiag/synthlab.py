"""Synthetic scenario generators and numerical certificates.

Three families of machinery live here:

* ``gen_prop1`` builds paired stores satisfying the exact hypotheses of the
  cross-modal transfer guarantee: a constant gap along a fixed unit
  direction, a constant gap-direction component in every image embedding,
  and zero mean in the orthogonal subspace.
* ``gen_planted`` builds a spurious-correlation world (class direction vs
  nuisance direction, correlated during training, balanced at validation)
  together with a deterministic text-embedding function that is total over
  the attribute schema, so language probes can cover combinations never
  seen in training.
* ``spectral_identity_check`` / ``classmean_check`` verify the
  graph-factorization identities behind the contrastive loss: the quadratic
  loss equals ‖P − FGᵀ‖²_F up to the constant Σp², and under the
  class-consistent pairing assumption the scaled class-mean linear head
  maps text factors onto their labels exactly.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .prompts import AttributeSchema, Template, parse_template
from .store import EmbeddingStore, StoreMeta


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# constant-gap world


@dataclass
class Prop1Params:
    d: int = 32
    n: int = 500
    classes: int = 4
    gap_norm: float = 1.0
    tau: float = 1.0
    class_separation: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.d < self.classes + 2:
            raise SynthError(f"d={self.d} leaves no room for {self.classes} classes plus the gap direction")
        if self.noise < 0:
            raise SynthError("noise must be ≥ 0")
        if self.n < self.classes:
            raise SynthError("need at least one point per class")

    def to_json_dict(self) -> dict:
        return {
            "kind": "prop1",
            "d": self.d,
            "n": self.n,
            "classes": self.classes,
            "gap_norm": self.gap_norm,
            "tau": self.tau,
            "class_separation": self.class_separation,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Prop1Params":
        return cls(**{k: v for k, v in obj.items() if k != "kind"})


def gen_prop1(params: Prop1Params) -> tuple[EmbeddingStore, EmbeddingStore, np.ndarray]:
    """Paired stores with an exactly constant gap; returns (image, text, gap).

    The gap sits on the first coordinate axis, so the within-subspace
    structure lives in the remaining coordinates and the orthogonality /
    constant-component hypotheses survive float32 serialization exactly.
    The within-subspace points are mean-centered, so the zero-mean
    hypothesis holds at float64 precision.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    d, n, C = params.d, params.n, params.classes

    labels = rng.permutation(np.arange(n) % C).astype(int)
    basis = np.linalg.qr(rng.standard_normal((d - 1, C)))[0]  # orthonormal class directions
    z = np.zeros((n, d))
    z[:, 1:] = params.class_separation * basis[:, labels].T
    z[:, 1:] += params.noise * rng.standard_normal((n, d - 1))
    z -= z.mean(axis=0)

    g_hat = np.zeros(d)
    g_hat[0] = 1.0
    gap = params.gap_norm * g_hat
    X = z + params.tau * params.gap_norm * g_hat
    Y = X - gap

    meta = StoreMeta(
        ids=[f"pair_{i:05d}" for i in range(n)],
        labels=[int(c) for c in labels],
        class_names=[f"class_{c}" for c in range(C)],
        source="synthetic constant-gap scenario",
    )
    img = EmbeddingStore(matrix=X, modality="image", normalized=False, meta=meta)
    txt = EmbeddingStore(matrix=Y, modality="text", normalized=False, meta=meta)
    img.validate()
    txt.validate()
    return img, txt, gap


# ---------------------------------------------------------------------------
# planted spurious-correlation world


@dataclass
class PlantedParams:
    n_classes: int = 2
    nuisance_sizes: tuple[int, ...] = (2,)
    correlation: float = 0.95
    unseen_combos: tuple[tuple[int, int], ...] = ()  # (class, first-nuisance value)
    n_train: int = 1000
    n_val: int = 800
    d: int = 16
    # scalar, or per-family (class first, then each nuisance family)
    direction_scale: float | tuple[float, ...] = 1.0
    noise: float = 0.25
    text_noise: float | None = None  # defaults to 0.01 * max direction scale
    gap_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.5 < self.correlation <= 1.0):
            raise SynthError(f"correlation must lie in (0.5, 1], got {self.correlation}")
        if self.n_classes < 2 or any(s < 2 for s in self.nuisance_sizes):
            raise SynthError("need at least two classes and two values per nuisance family")
        needed = 1 + self.n_classes + sum(self.nuisance_sizes)
        if self.d < needed:
            raise SynthError(f"d={self.d} too small for {needed} orthogonal directions")
        b0 = self.nuisance_sizes[0]
        for c in range(self.n_classes):
            blocked = {b for cc, b in self.unseen_combos if cc == c}
            if len(blocked) >= b0:
                raise SynthError(f"unseen combos cover every nuisance value for class {c}")
        for c, b in self.unseen_combos:
            if not (0 <= c < self.n_classes and 0 <= b < b0):
                raise SynthError(f"unseen combo ({c}, {b}) out of range")
        if len(self.family_scales()) != 1 + len(self.nuisance_sizes):
            raise SynthError("direction_scale must be a scalar or one value per family")

    def family_scales(self) -> tuple[float, ...]:
        """Per-family direction amplitudes: class family first."""
        if isinstance(self.direction_scale, (int, float)):
            return (float(self.direction_scale),) * (1 + len(self.nuisance_sizes))
        return tuple(float(s) for s in self.direction_scale)

    @property
    def effective_text_noise(self) -> float:
        return 0.01 * max(self.family_scales()) if self.text_noise is None else self.text_noise

    def to_json_dict(self) -> dict:
        return {
            "kind": "planted",
            "n_classes": self.n_classes,
            "nuisance_sizes": list(self.nuisance_sizes),
            "correlation": self.correlation,
            "unseen_combos": [list(c) for c in self.unseen_combos],
            "n_train": self.n_train,
            "n_val": self.n_val,
            "d": self.d,
            "direction_scale": (
                self.direction_scale
                if isinstance(self.direction_scale, (int, float))
                else list(self.direction_scale)
            ),
            "noise": self.noise,
            "text_noise": self.text_noise,
            "gap_scale": self.gap_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "PlantedParams":
        obj = dict(obj)
        obj.pop("kind", None)
        obj["nuisance_sizes"] = tuple(obj.get("nuisance_sizes", (2,)))
        obj["unseen_combos"] = tuple(tuple(c) for c in obj.get("unseen_combos", ()))
        if isinstance(obj.get("direction_scale"), list):
            obj["direction_scale"] = tuple(obj["direction_scale"])
        return cls(**obj)


TextEmbed = Callable[[str], np.ndarray]

CLASS_FAMILY = "category"


def planted_schema(params: PlantedParams) -> AttributeSchema:
    families = [(CLASS_FAMILY, tuple(f"category{c}" for c in range(params.n_classes)))]
    for j, size in enumerate(params.nuisance_sizes):
        families.append((f"aspect{j}", tuple(f"aspect{j}v{b}" for b in range(size))))
    schema = AttributeSchema(
        families=tuple(families),
        class_family=CLASS_FAMILY,
        class_values=tuple(f"category{c}" for c in range(params.n_classes)),
    )
    schema.validate()
    return schema


def planted_template(params: PlantedParams) -> Template:
    source = "a photo of a {" + CLASS_FAMILY + "}"
    for j in range(len(params.nuisance_sizes)):
        source += "[, {aspect" + str(j) + "}]"
    source += "."
    return parse_template(source)


@dataclass
class PlantedScenario:
    params: PlantedParams
    train: EmbeddingStore
    val: EmbeddingStore
    schema: AttributeSchema
    text_embed: TextEmbed = field(repr=False)
    directions: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def gap(self) -> np.ndarray:
        return self.directions["gap"]

    def minority_slices(self) -> list[dict[str, str]]:
        return minority_assignments(self.params)


def _token_directions(params: PlantedParams, schema: AttributeSchema, rng: np.random.Generator):
    count = 1 + params.n_classes + sum(params.nuisance_sizes)
    Q = np.linalg.qr(rng.standard_normal((params.d, count)))[0]
    directions: dict[str, np.ndarray] = {"gap": params.gap_scale * Q[:, 0]}
    col = 1
    for name, values in schema.families:
        for v in values:
            directions[v] = Q[:, col]
            col += 1
    return directions


def _value_pattern(value: str) -> re.Pattern:
    return re.compile(r"(?<![A-Za-z0-9_])" + re.escape(value) + r"(?![A-Za-z0-9_])")


def gen_planted(params: PlantedParams) -> PlantedScenario:
    """Build the planted scenario; deterministic per seed.

    Training samples pair class c with the "majority" first-nuisance value
    b = c mod B with probability ``correlation`` and with the other values
    uniformly otherwise; pairs listed in ``unseen_combos`` never occur in
    training. Validation is exactly balanced over the full combination
    grid. The text-embedding function detects schema value tokens in a
    prompt string and sums their planted directions, minus the gap vector,
    plus a small per-prompt seeded noise; absent families contribute
    nothing, so prompts over unseen combinations still embed.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    schema = planted_schema(params)
    directions = _token_directions(params, schema, rng)
    gap = directions["gap"]
    scales = params.family_scales()
    scale_of = {CLASS_FAMILY: scales[0]}
    scale_of.update({f"aspect{j}": scales[1 + j] for j in range(len(params.nuisance_sizes))})
    b0_size = params.nuisance_sizes[0]
    unseen = set(map(tuple, params.unseen_combos))

    def image_point(c: int, nuisances: tuple[int, ...], noise_vec: np.ndarray) -> np.ndarray:
        vec = scales[0] * directions[f"category{c}"]
        for j, b in enumerate(nuisances):
            vec = vec + scales[1 + j] * directions[f"aspect{j}v{b}"]
        return vec + params.noise * noise_vec

    def sample_train_pair() -> tuple[int, int]:
        while True:
            c = int(rng.integers(params.n_classes))
            if rng.random() < params.correlation:
                b = c % b0_size
            else:
                others = [v for v in range(b0_size) if v != c % b0_size]
                b = others[int(rng.integers(len(others)))]
            if (c, b) not in unseen:
                return c, b

    def build_store(rows: list[tuple[int, tuple[int, ...]]], prefix: str) -> EmbeddingStore:
        noise_mat = rng.standard_normal((len(rows), params.d))
        matrix = np.stack([image_point(c, nuis, noise_mat[i]) for i, (c, nuis) in enumerate(rows)])
        attributes = {CLASS_FAMILY: [f"category{c}" for c, _ in rows]}
        for j in range(len(params.nuisance_sizes)):
            attributes[f"aspect{j}"] = [f"aspect{j}v{nuis[j]}" for _, nuis in rows]
        meta = StoreMeta(
            ids=[f"{prefix}_{i:05d}" for i in range(len(rows))],
            labels=[int(c) for c, _ in rows],
            attributes=attributes,
            class_names=list(schema.class_values),
            source="synthetic planted-correlation scenario",
        )
        store = EmbeddingStore(matrix=matrix, modality="image", normalized=False, meta=meta)
        store.validate()
        return store

    train_rows = []
    for _ in range(params.n_train):
        c, b = sample_train_pair()
        rest = tuple(int(rng.integers(size)) for size in params.nuisance_sizes[1:])
        train_rows.append((c, (b, *rest)))
    train = build_store(train_rows, "train")

    grid = [
        (c, combo)
        for c in range(params.n_classes)
        for combo in _all_combos(params.nuisance_sizes)
    ]
    n_per = params.n_val // len(grid)
    if n_per < 1:
        raise SynthError(f"n_val={params.n_val} smaller than the {len(grid)}-cell combination grid")
    val_rows = [cell for cell in grid for _ in range(n_per)]
    val = build_store(val_rows, "val")

    patterns = [
        (family, value, _value_pattern(value))
        for family, values in schema.families
        for value in values
    ]
    text_noise = params.effective_text_noise
    seed = params.seed

    def text_embed(prompt: str) -> np.ndarray:
        vec = -gap.copy()
        for family, value, pattern in patterns:
            if pattern.search(prompt):
                vec = vec + scale_of[family] * directions[value]
        digest = hashlib.sha256(f"{seed}:{prompt}".encode("utf-8")).digest()
        noise_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return vec + text_noise * noise_rng.standard_normal(params.d)

    return PlantedScenario(
        params=params,
        train=train,
        val=val,
        schema=schema,
        text_embed=text_embed,
        directions=directions,
    )


def _all_combos(sizes: Sequence[int]) -> list[tuple[int, ...]]:
    combos: list[tuple[int, ...]] = [()]
    for size in sizes:
        combos = [(*c, v) for c in combos for v in range(size)]
    return combos


def minority_assignments(params: PlantedParams) -> list[dict[str, str]]:
    """(class, first-nuisance) slice assignments off the correlated diagonal."""
    b0 = params.nuisance_sizes[0]
    return [
        {CLASS_FAMILY: f"category{c}", "aspect0": f"aspect0v{b}"}
        for c in range(params.n_classes)
        for b in range(b0)
        if b != c % b0
    ]


def majority_assignments(params: PlantedParams) -> list[dict[str, str]]:
    b0 = params.nuisance_sizes[0]
    return [
        {CLASS_FAMILY: f"category{c}", "aspect0": f"aspect0v{c % b0}"}
        for c in range(params.n_classes)
    ]


def row_prompts(store: EmbeddingStore, schema: AttributeSchema, template: Template) -> list[str]:
    """Render one prompt per store row from its attribute metadata."""
    from .prompts import render

    if store.meta.attributes is None:
        raise SynthError("store has no attribute metadata")
    prompts = []
    for i in range(store.n):
        assignment = {
            name: store.meta.attributes[name][i]
            for name, _ in schema.families
            if name in store.meta.attributes
        }
        prompts.append(render(template, assignment))
    return prompts


def paired_text_matrix(
    store: EmbeddingStore,
    schema: AttributeSchema,
    template: Template,
    text_embed: TextEmbed,
) -> np.ndarray:
    return np.stack([text_embed(p) for p in row_prompts(store, schema, template)])


def load_scenario(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("kind") == "planted":
        return {"kind": "planted", "params": PlantedParams.from_json_dict(obj)}
    if obj.get("kind") == "prop1":
        return {"kind": "prop1", "params": Prop1Params.from_json_dict(obj)}
    raise SynthError(f"unknown scenario kind {obj.get('kind')!r} in {path}")


# ---------------------------------------------------------------------------
# graph-factorization certificates


@dataclass
class GraphInstance:
    P: np.ndarray  # N×M pairing probabilities
    F: np.ndarray  # N×D image factors
    G: np.ndarray  # M×D text factors
    Y_x: np.ndarray | None = None  # N×C one-hot
    Y_z: np.ndarray | None = None  # M×C one-hot

    def validate(self, check_uniform: bool = False, check_labels: bool = False) -> None:
        if (self.P < 0).any():
            raise SynthError("pairing matrix has negative entries")
        if abs(float(self.P.sum()) - 1.0) > 1e-12:
            raise SynthError(f"pairing matrix sums to {self.P.sum()!r}, expected 1")
        N, M = self.P.shape
        if check_uniform:
            if np.abs(self.P.sum(axis=1) - 1.0 / N).max() > 1e-12:
                raise SynthError("row marginals are not uniform 1/N")
            if np.abs(self.P.sum(axis=0) - 1.0 / M).max() > 1e-12:
                raise SynthError("column marginals are not uniform 1/M")
        if check_labels:
            if self.Y_x is None or self.Y_z is None:
                raise SynthError("label matrices required")
            if np.abs(self.P.T @ self.Y_x - self.Y_z / M).max() > 1e-12:
                raise SynthError("class-consistent pairing assumption violated")


def spectral_loss(P: np.ndarray, F: np.ndarray, G: np.ndarray) -> float:
    """Quadratic contrastive loss in expectation form.

    L = −2 Σ p(x,z) f(x)ᵀg(z) + N·M Σ p_x(x) p_z(z) (f(x)ᵀg(z))², with the
    marginals computed from P rather than assumed.
    """
    N, M = P.shape
    S = F @ G.T
    p_x = P.sum(axis=1)
    p_z = P.sum(axis=0)
    return float(-2.0 * np.sum(P * S) + N * M * np.sum(p_x[:, None] * p_z[None, :] * S**2))


def uniform_pairing(N: int, rng: np.random.Generator, k: int = 2) -> np.ndarray:
    """Average of k random N×N permutation matrices, scaled to sum to 1.

    k=2 keeps every entry dyadic, so the uniform marginals are exact in
    floating point.
    """
    P = np.zeros((N, N))
    for _ in range(k):
        perm = rng.permutation(N)
        P[np.arange(N), perm] += 1.0
    return P / (k * N)


def spectral_identity_check(N: int, D: int, seed: int, k: int = 2) -> float:
    """|‖P − FGᵀ‖²_F − (L + Σp²)| for a uniform-marginal P and random factors."""
    if N < 2:
        raise SynthError("N must be ≥ 2")
    rng = np.random.default_rng(seed)
    P = uniform_pairing(N, rng, k=k)
    GraphInstance(P=P, F=np.zeros((N, D)), G=np.zeros((N, D))).validate(check_uniform=True)
    F = rng.standard_normal((N, D))
    G = rng.standard_normal((N, D))
    frob = float(np.sum((P - F @ G.T) ** 2))
    return abs(frob - (spectral_loss(P, F, G) + float(np.sum(P**2))))


def scaling_nonuniqueness_check(N: int, D: int, seed: int, factor: float = 2.0) -> dict:
    """Scaling (cF, G/c) preserves the loss while moving the measured gap.

    Returns the loss change and the modality-mean distance before/after;
    the minimizer family is therefore not unique, and gapped minimizers
    exist alongside gap-free ones.
    """
    rng = np.random.default_rng(seed)
    P = uniform_pairing(N, rng)
    F = rng.standard_normal((N, D)) + 1.0  # offset so the modality means differ
    G = rng.standard_normal((N, D)) - 1.0
    loss_before = spectral_loss(P, F, G)
    loss_after = spectral_loss(P, factor * F, G / factor)
    gap_before = float(np.linalg.norm(F.mean(axis=0) - G.mean(axis=0)))
    gap_after = float(np.linalg.norm((factor * F).mean(axis=0) - (G / factor).mean(axis=0)))
    return {
        "loss_delta": abs(loss_after - loss_before),
        "gap_before": gap_before,
        "gap_after": gap_after,
    }


def _class_sizes(total: int, classes: int) -> list[int]:
    base, extra = divmod(total, classes)
    if base == 0:
        raise SynthError(f"cannot split {total} items into {classes} non-empty classes")
    return [base + (1 if c < extra else 0) for c in range(classes)]


def build_class_graph(N: int, M: int, classes: int) -> GraphInstance:
    """Block pairing matrix satisfying the class-consistent assumption."""
    n_sizes = _class_sizes(N, classes)
    m_sizes = []
    for c, n_c in enumerate(n_sizes):
        if (n_c * M) % N != 0:
            raise SynthError(f"class {c}: text count n_c·M/N = {n_c}·{M}/{N} is not an integer")
        m_sizes.append(n_c * M // N)
    P = np.zeros((N, M))
    Y_x = np.zeros((N, classes))
    Y_z = np.zeros((M, classes))
    i = j = 0
    for c, (n_c, m_c) in enumerate(zip(n_sizes, m_sizes)):
        P[i : i + n_c, j : j + m_c] = 1.0 / (N * m_c)
        Y_x[i : i + n_c, c] = 1.0
        Y_z[j : j + m_c, c] = 1.0
        i += n_c
        j += m_c
    return GraphInstance(P=P, F=np.zeros((N, 1)), G=np.zeros((M, 1)), Y_x=Y_x, Y_z=Y_z)


def classmean_check(
    N: int,
    M: int,
    D: int,
    classes: int,
    seed: int,
    violate_assumption: bool = False,
    max_retries: int = 5,
) -> float:
    """Residual ‖G·(M·FᵀY_x) − Y_z‖_∞ for an exact factorization of P.

    F is a random full-row-rank factor (D ≥ N required); G is chosen so
    FGᵀ = P exactly, and the scaled class-mean head M·FᵀY_x must then map
    text factors onto their one-hot labels. ``violate_assumption`` moves
    pairing mass across class blocks for a single image, which breaks the
    identity by an O(1) amount.
    """
    if D < N:
        raise SynthError(f"D={D} must be ≥ N={N} for a full-row-rank factor")
    inst = build_class_graph(N, M, classes)
    inst.validate(check_labels=not violate_assumption)
    P = inst.P.copy()
    if violate_assumption:
        # move half of one entry's mass to a wrong-class text in the same row
        i = 0
        j_same = int(np.nonzero(P[i] > 0)[0][0])
        j_other = int(np.nonzero(inst.Y_z[:, 1] > 0)[0][0])
        delta = P[i, j_same] / 2.0
        P[i, j_same] -= delta
        P[i, j_other] += delta

    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + 1_000_003 * attempt)
        F = rng.standard_normal((N, D))
        if np.linalg.matrix_rank(F) == N:
            break
    else:
        raise SynthError(f"could not draw a full-row-rank {N}×{D} factor in {max_retries} tries")

    Gt = F.T @ np.linalg.solve(F @ F.T, P)  # FGᵀ = P exactly
    G = Gt.T
    head = M * F.T @ inst.Y_x
    return float(np.abs(G @ head - inst.Y_z).max())
