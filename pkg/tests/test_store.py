import json

import numpy as np
import pytest

from xdiag.store import (
    EmbeddingStore,
    StoreError,
    StoreMeta,
    l2_normalize,
    read_store,
    write_store,
)


def make_store(matrix, **kw):
    return EmbeddingStore(matrix=np.asarray(matrix, dtype=np.float64), **kw)


def test_file_size_arithmetic(tmp_path):
    # 16-byte header (magic/version/flags + n + d) then n*d float32 values
    store = make_store([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], modality="image")
    path = tmp_path / "a.emb"
    write_store(store, path)
    assert path.stat().st_size == 16 + 2 * 3 * 4


def test_empty_ids_with_rows_rejected(tmp_path):
    store = make_store([[1.0], [2.0]], meta=StoreMeta(ids=[]))
    with pytest.raises(StoreError, match="meta length mismatch"):
        write_store(store, tmp_path / "a.emb")


def test_meta_length_mismatch(tmp_path):
    store = make_store([[1.0], [2.0]], meta=StoreMeta(labels=[0]))
    with pytest.raises(StoreError, match="meta length mismatch"):
        write_store(store, tmp_path / "a.emb")


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    store = make_store(
        rng.standard_normal((100, 512)),
        modality="text",
        meta=StoreMeta(ids=[f"p{i}" for i in range(100)], source="unit test"),
    )
    p1, p2 = tmp_path / "a.emb", tmp_path / "b.emb"
    write_store(store, p1)
    back = read_store(p1)
    write_store(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # float32 matrices read back identical per entry
    again = read_store(p2)
    assert np.array_equal(back.matrix, again.matrix)
    assert back.modality == "text"
    assert back.meta.ids == store.meta.ids


def test_round_trip_meta(tmp_path):
    store = make_store(
        [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        modality="image",
        meta=StoreMeta(
            ids=["a", "b", "c"],
            labels=[[0], [1], [0, 1]],
            attributes={"place": ["ocean", "land", "ocean"]},
            class_names=["x", "y"],
        ),
    )
    path = tmp_path / "a.emb"
    write_store(store, path)
    back = read_store(path)
    assert back.meta.labels == [[0], [1], [0, 1]]
    assert back.meta.multilabel
    assert back.meta.attributes == {"place": ["ocean", "land", "ocean"]}
    assert back.meta.class_names == ["x", "y"]


def test_bad_magic(tmp_path):
    path = tmp_path / "a.emb"
    path.write_bytes(b"XEMB" + bytes(12) + bytes(8))
    with pytest.raises(StoreError, match="bad magic"):
        read_store(path)


def test_unsupported_version(tmp_path):
    store = make_store([[1.0]])
    path = tmp_path / "a.emb"
    write_store(store, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(StoreError, match="version 9 unsupported"):
        read_store(path)


def test_truncated_data_section(tmp_path):
    store = make_store([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "a.emb"
    write_store(store, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(StoreError, match="size mismatch"):
        read_store(path)


def test_missing_sidecar_yields_empty_meta(tmp_path):
    store = make_store([[1.0, 2.0]], meta=StoreMeta(ids=["z"]))
    path = tmp_path / "a.emb"
    write_store(store, path)
    (tmp_path / "a.emb.meta.json").unlink()
    back = read_store(path)
    assert back.meta.ids is None
    assert back.meta.labels is None


def test_nonfinite_rejected(tmp_path):
    store = make_store([[np.inf, 0.0]])
    with pytest.raises(StoreError, match="non-finite"):
        write_store(store, tmp_path / "a.emb")


def test_label_range_checked():
    store = make_store([[1.0]], meta=StoreMeta(labels=[3], class_names=["a", "b"]))
    with pytest.raises(StoreError, match="label 3"):
        store.validate()


def test_attribute_values_nonempty():
    store = make_store([[1.0]], meta=StoreMeta(attributes={"f": [""]}))
    with pytest.raises(StoreError, match="non-empty"):
        store.validate()


def test_normalized_flag_enforced(tmp_path):
    store = make_store([[3.0, 4.0]], normalized=True)
    with pytest.raises(StoreError, match="norm"):
        write_store(store, tmp_path / "a.emb")
    ok = make_store([[0.6, 0.8]], normalized=True)
    write_store(ok, tmp_path / "b.emb")


def test_sidecar_schema(tmp_path):
    store = make_store([[1.0]], meta=StoreMeta(ids=["p"], labels=[0], class_names=["c"]))
    path = tmp_path / "a.emb"
    write_store(store, path)
    obj = json.loads((tmp_path / "a.emb.meta.json").read_text())
    assert set(obj) == {"ids", "labels", "attributes", "class_names", "source"}
    assert obj["ids"] == ["p"]
    assert obj["attributes"] is None


def test_l2_normalize_345():
    out = l2_normalize(np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_unit_row_unchanged():
    row = np.array([[1.0, 0.0, 0.0]])
    assert np.array_equal(l2_normalize(row), row)


def test_l2_normalize_random_norms_and_idempotence():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((50, 8)) * 3.0
    out = l2_normalize(m)
    assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() <= 1e-12
    twice = l2_normalize(out)
    assert np.abs(twice - out).max() <= 1e-12
    # direction preserved
    i = 13
    cos = out[i] @ m[i] / np.linalg.norm(m[i])
    assert abs(cos - 1.0) <= 1e-12


def test_l2_normalize_zero_row():
    with pytest.raises(StoreError, match="row 1"):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))
