import json

import numpy as np
import pytest

from xdiag.geometry import close_gap, gap_report, pair_gaps, per_pair_stats
from xdiag.store import EmbeddingStore, StoreError, StoreMeta
from xdiag.synthlab import Prop1Params, gen_prop1


def paired(img_matrix, txt_matrix, labels=None):
    meta = StoreMeta(labels=labels) if labels is not None else StoreMeta()
    return (
        EmbeddingStore(matrix=np.asarray(img_matrix, float), modality="image", meta=meta),
        EmbeddingStore(matrix=np.asarray(txt_matrix, float), modality="text", meta=meta),
    )


def test_pair_gaps_identical_stores():
    m = np.random.default_rng(0).standard_normal((10, 4))
    img, txt = paired(m, m)
    gaps, mean = pair_gaps(img, txt)
    assert np.all(gaps == 0.0)
    assert np.all(mean == 0.0)


def test_pair_gaps_constant_offset():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((20, 5))
    v = rng.standard_normal(5)
    img, txt = paired(base + v, base)
    gaps, mean = pair_gaps(img, txt)
    assert np.abs(gaps - v).max() <= 1e-12
    assert np.abs(mean - v).max() <= 1e-12


def test_pair_gaps_mean_matches_naive_summation():
    rng = np.random.default_rng(2)
    img, txt = paired(rng.standard_normal((37, 6)), rng.standard_normal((37, 6)))
    gaps, mean = pair_gaps(img, txt)
    # independent accumulation order: per-row python loop, reversed
    acc = np.zeros(6)
    for i in reversed(range(37)):
        acc += img.matrix[i] - txt.matrix[i]
    assert np.abs(acc / 37 - mean).max() <= 1e-12


def test_pair_gaps_shape_mismatch():
    img, _ = paired(np.zeros((3, 2)), np.zeros((3, 2)))
    _, txt = paired(np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(StoreError, match="shape mismatch"):
        pair_gaps(img, txt)


def test_gap_report_constant_gap():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((30, 6))
    v = np.array([2.0, 0, 0, 0, 0, 0])
    img, txt = paired(base + v, base)
    rep = gap_report(img, txt)
    assert rep.individual.magnitude.std == 0.0
    assert rep.individual.direction.mean == pytest.approx(1.0, abs=1e-12)
    assert rep.individual.direction.std == pytest.approx(0.0, abs=1e-12)
    assert rep.n_pairs == 30
    assert rep.class_level is None  # no labels


def test_gap_report_prop1_projection_oracle():
    img, txt, gap = gen_prop1(Prop1Params(d=16, n=200, classes=3, seed=5))
    rep = gap_report(img, txt)
    assert abs(rep.orthogonality["image"].mean) <= 1e-8
    assert rep.orthogonality["image"].std <= 1e-8
    assert abs(rep.orthogonality["text"].mean) <= 1e-8
    assert abs(rep.center["image"].mean) <= 1e-8
    assert rep.center["image"].std <= 1e-8
    # direct projection arithmetic as the oracle
    X = img.matrix
    g_unit = gap / np.linalg.norm(gap)
    centered = X - X.mean(axis=0)
    dots = centered @ (gap * 0 + rep.mean_gap)
    assert np.abs(dots).max() <= 1e-8
    projected = X - np.outer(X @ g_unit, g_unit)
    assert np.abs(projected.mean(axis=0)).max() <= 1e-8


def test_gap_report_class_level():
    rng = np.random.default_rng(6)
    base = rng.standard_normal((40, 5))
    v = np.array([1.0, 1.0, 0, 0, 0])
    labels = [i % 2 for i in range(40)]
    img, txt = paired(base + v, base, labels=labels)
    rep = gap_report(img, txt)
    assert rep.n_classes == 2
    assert rep.class_level.magnitude.std <= 1e-12
    assert rep.class_level.direction.mean == pytest.approx(1.0, abs=1e-12)


def test_gap_report_multilabel_class_means():
    rng = np.random.default_rng(8)
    base = rng.standard_normal((12, 4))
    labels = [[0], [1], [0, 1], [0]] * 3
    img, txt = paired(base + 1.0, base, labels=labels)
    rep = gap_report(img, txt)
    assert rep.n_classes == 2


def test_gap_report_zero_gap_sentinels():
    m = np.random.default_rng(7).standard_normal((10, 3))
    img, txt = paired(m, m)
    rep = gap_report(img, txt)
    assert rep.individual.direction is None
    assert rep.orthogonality is None
    assert rep.center is None
    payload = rep.to_json_dict()
    assert payload["orthogonality"] is None
    json.dumps(payload)  # serializable


def test_direction_mean_brute_force():
    rng = np.random.default_rng(9)
    img, txt = paired(rng.standard_normal((60, 5)), rng.standard_normal((60, 5)))
    rep = gap_report(img, txt)
    gaps = img.matrix - txt.matrix
    mean_gap = gaps.mean(axis=0)
    cosines = []
    for i in range(60):
        g = gaps[i]
        cosines.append(float(g @ mean_gap / (np.linalg.norm(g) * np.linalg.norm(mean_gap))))
    assert rep.individual.direction.mean == pytest.approx(np.mean(cosines), abs=1e-12)


def test_close_gap_centers_columns():
    rng = np.random.default_rng(10)
    st = EmbeddingStore(matrix=rng.standard_normal((25, 7)) + 3.0, modality="image", normalized=False)
    closed, mean = close_gap(st)
    assert np.abs(closed.matrix.mean(axis=0)).max() <= 1e-12
    assert np.abs(mean - st.matrix.mean(axis=0)).max() == 0.0
    assert closed.normalized is False


def test_close_gap_single_row():
    st = EmbeddingStore(matrix=np.array([[1.0, -2.0, 3.0]]), modality="image")
    closed, mean = close_gap(st)
    assert np.all(closed.matrix == 0.0)
    assert np.array_equal(mean, [1.0, -2.0, 3.0])


def test_close_gap_cancels_constant_gap():
    rng = np.random.default_rng(11)
    base = rng.standard_normal((30, 4))
    img, txt = paired(base + np.array([5.0, 0, 0, 0]), base)
    ci, _ = close_gap(img)
    ct, _ = close_gap(txt)
    gaps, _ = pair_gaps(ci, ct)
    assert np.linalg.norm(gaps, axis=1).max() <= 1e-12


def test_close_gap_idempotent():
    rng = np.random.default_rng(12)
    st = EmbeddingStore(matrix=rng.standard_normal((15, 4)) + 2.0, modality="image")
    once, _ = close_gap(st)
    twice, mean2 = close_gap(once)
    assert np.abs(twice.matrix - once.matrix).max() <= 1e-12
    assert np.abs(mean2).max() <= 1e-12


def test_per_pair_stats_rows():
    rng = np.random.default_rng(13)
    img, txt = paired(rng.standard_normal((8, 3)), rng.standard_normal((8, 3)))
    rows = per_pair_stats(img, txt)
    assert len(rows) == 8
    assert {"pair", "magnitude", "direction", "orthogonality_image", "orthogonality_text"} <= set(rows[0])
