import collections

import numpy as np
import pytest

from xdiag.geometry import pair_gaps
from xdiag.store import write_store
from xdiag.synthlab import (
    PlantedParams,
    Prop1Params,
    SynthError,
    build_class_graph,
    classmean_check,
    gen_planted,
    gen_prop1,
    scaling_nonuniqueness_check,
    spectral_identity_check,
    spectral_loss,
    uniform_pairing,
)


# ---------------------------------------------------------------------------
# constant-gap scenario


def test_prop1_gap_rows_constant():
    img, txt, gap = gen_prop1(Prop1Params(seed=1))
    gaps, mean = pair_gaps(img, txt)
    assert np.abs(gaps - gap).max() <= 1e-12
    assert np.abs(mean - gap).max() <= 1e-12
    assert abs(np.linalg.norm(gap) - 1.0) <= 1e-12


def test_prop1_constant_gap_component():
    params = Prop1Params(seed=2, tau=1.7, gap_norm=0.8)
    img, txt, gap = gen_prop1(params)
    g_unit = gap / np.linalg.norm(gap)
    dots = img.matrix @ g_unit
    assert np.abs(dots - dots[0]).max() <= 1e-12
    assert dots[0] == pytest.approx(1.7 * 0.8, abs=1e-12)


def test_prop1_zero_mean_orthogonal_subspace():
    img, txt, gap = gen_prop1(Prop1Params(seed=3))
    g_unit = gap / np.linalg.norm(gap)
    projected = img.matrix - np.outer(img.matrix @ g_unit, g_unit)
    assert np.abs(projected.mean(axis=0)).max() <= 1e-12


def test_prop1_every_class_present():
    img, _, _ = gen_prop1(Prop1Params(seed=4, classes=4, n=100))
    assert sorted(set(img.meta.labels)) == [0, 1, 2, 3]


def test_prop1_dimension_guard():
    with pytest.raises(SynthError, match="room"):
        Prop1Params(d=4, classes=4).validate()


# ---------------------------------------------------------------------------
# planted scenario


def test_planted_cooccurrence_rate():
    params = PlantedParams(seed=5, n_train=4000, correlation=0.95)
    sc = gen_planted(params)
    attrs = sc.train.meta.attributes
    match = sum(
        1
        for c, b in zip(attrs["category"], attrs["aspect0"])
        if b.endswith(c[-1])  # majority pairing is value index == class index
    )
    rate = match / params.n_train
    assert abs(rate - 0.95) < 0.02  # binomial tolerance


def test_planted_unseen_combos_absent_from_training_only():
    params = PlantedParams(seed=6, unseen_combos=((0, 1),), n_train=600)
    sc = gen_planted(params)
    train_pairs = set(zip(sc.train.meta.attributes["category"], sc.train.meta.attributes["aspect0"]))
    assert ("category0", "aspect0v1") not in train_pairs
    val_pairs = set(zip(sc.val.meta.attributes["category"], sc.val.meta.attributes["aspect0"]))
    assert ("category0", "aspect0v1") in val_pairs


def test_planted_unseen_covering_class_rejected():
    with pytest.raises(SynthError, match="cover"):
        PlantedParams(unseen_combos=((0, 0), (0, 1))).validate()


def test_planted_val_balanced():
    params = PlantedParams(seed=7, n_val=800)
    sc = gen_planted(params)
    counts = collections.Counter(
        zip(sc.val.meta.attributes["category"], sc.val.meta.attributes["aspect0"])
    )
    assert len(counts) == 4
    assert len(set(counts.values())) == 1


def test_planted_text_embed_total_over_schema():
    params = PlantedParams(seed=8, unseen_combos=((0, 1),))
    sc = gen_planted(params)
    # a prompt for the unseen combination still embeds
    vec = sc.text_embed("a photo of a category0, aspect0v1.")
    expected = (
        sc.directions["category0"] * sc.params.family_scales()[0]
        + sc.directions["aspect0v1"] * sc.params.family_scales()[1]
        - sc.gap
    )
    assert np.linalg.norm(vec - expected) < 5 * params.effective_text_noise * np.sqrt(params.d)


def test_planted_text_embed_token_matching_is_word_bounded():
    params = PlantedParams(seed=9, nuisance_sizes=(12,), d=24)
    sc = gen_planted(params)
    v1 = sc.text_embed("a photo of a category0, aspect0v1.")
    v11 = sc.text_embed("a photo of a category0, aspect0v11.")
    # aspect0v1 must not match inside aspect0v11
    d1 = v1 - sc.text_embed("a photo of a category0.")
    d11 = v11 - sc.text_embed("a photo of a category0.")
    s = params.family_scales()[1]
    assert np.linalg.norm(d1 - s * sc.directions["aspect0v1"]) < 0.2
    assert np.linalg.norm(d11 - s * sc.directions["aspect0v11"]) < 0.2


def test_planted_reproducible_byte_identical(tmp_path):
    params = PlantedParams(seed=10)
    a = gen_planted(params)
    b = gen_planted(PlantedParams.from_json_dict(params.to_json_dict()))
    for name, sa, sb in (("train", a.train, b.train), ("val", a.val, b.val)):
        pa, pb = tmp_path / f"{name}_a.emb", tmp_path / f"{name}_b.emb"
        write_store(sa, pa)
        write_store(sb, pb)
        assert pa.read_bytes() == pb.read_bytes()
    assert np.array_equal(a.text_embed("a photo of a category0."), b.text_embed("a photo of a category0."))


def test_planted_probe_fails_on_minority(tmp_path):
    from xdiag import probe

    params = PlantedParams(seed=11, direction_scale=(0.5, 1.0), noise=0.3)
    sc = gen_planted(params)
    model = probe.train(
        probe.linear_probe(params.d, 2), sc.train, sc.val, probe.TrainConfig(seed=11)
    )
    attrs = sc.val.meta.attributes
    _, hard = probe.predict(model, sc.val.matrix)
    correct = hard == np.asarray(sc.val.meta.labels)
    minority = np.asarray(
        [c[-1] != b[-1] for c, b in zip(attrs["category"], attrs["aspect0"])]
    )
    assert correct[minority].mean() < correct[~minority].mean() - 0.2


# ---------------------------------------------------------------------------
# spectral identity


def test_uniform_pairing_marginals_exact():
    P = uniform_pairing(8, np.random.default_rng(0))
    assert np.abs(P.sum(axis=1) - 1 / 8).max() == 0.0
    assert np.abs(P.sum(axis=0) - 1 / 8).max() == 0.0
    assert P.sum() == pytest.approx(1.0, abs=0)


@pytest.mark.parametrize("seed", range(10))
def test_spectral_identity_small(seed):
    n = 2 + seed
    assert spectral_identity_check(n, 6, seed) <= 1e-9


def test_spectral_identity_zero_factors():
    rng = np.random.default_rng(1)
    P = uniform_pairing(6, rng)
    F = np.zeros((6, 4))
    assert spectral_loss(P, F, F) == 0.0
    assert abs(np.sum(P**2) - np.sum(P**2)) == 0.0


def test_spectral_loss_minimum_at_exact_factorization():
    rng = np.random.default_rng(2)
    N, D = 6, 8
    P = uniform_pairing(N, rng)
    F = rng.standard_normal((N, D))
    # G solving FG^T = P exactly (D ≥ N)
    Gt = F.T @ np.linalg.solve(F @ F.T, P)
    loss = spectral_loss(P, F, Gt.T)
    assert loss == pytest.approx(-float(np.sum(P**2)), abs=1e-9)


def test_scaling_nonuniqueness():
    res = scaling_nonuniqueness_check(8, 4, seed=3)
    assert res["loss_delta"] <= 1e-10
    assert abs(res["gap_after"] - res["gap_before"]) > 0.1


# ---------------------------------------------------------------------------
# class-mean transfer


@pytest.mark.parametrize("seed", range(8))
def test_classmean_residual_small(seed):
    assert classmean_check(8, 8, 12, 2, seed) <= 1e-8


def test_classmean_single_class():
    inst = build_class_graph(4, 4, 1)
    assert np.array_equal(inst.Y_x, np.ones((4, 1)))
    rng = np.random.default_rng(0)
    F = rng.standard_normal((4, 6))
    head = 4 * F.T @ inst.Y_x
    Gt = F.T @ np.linalg.solve(F @ F.T, inst.P)
    out = Gt.T @ head
    assert np.abs(out - 1.0).max() <= 1e-8
    assert classmean_check(4, 4, 6, 1, 0) <= 1e-8


def test_classmean_assumption_violation_detected():
    residual = classmean_check(6, 6, 10, 2, seed=4, violate_assumption=True)
    assert residual > 0.1


def test_classmean_requires_full_rank_dim():
    with pytest.raises(SynthError, match="full-row-rank"):
        classmean_check(8, 8, 4, 2, 0)


def test_class_graph_satisfies_assumption():
    inst = build_class_graph(9, 9, 3)
    inst.validate(check_uniform=True, check_labels=True)
