import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zslmap.errors import DatasetError, DimensionError
from zslmap.eszsl import argmax_rows, fit_eszsl, predict_compatibility
from zslmap.matio import (
    SyntheticSpec,
    ZslDataset,
    generate_synthetic,
    load_blocks,
    load_dataset,
    n_validation_classes,
    one_hot,
    read_matrix,
    save_blocks,
    save_dataset,
    validation_problem,
    validation_split,
    write_matrix,
)


def _tiny():
    return ZslDataset(
        seen_features=np.arange(6.0).reshape(2, 3),
        seen_labels=one_hot([0, 1, 1], 2),
        seen_semantics=np.ones((4, 2)),
        unseen_features=np.zeros((2, 1)),
        unseen_semantics=np.ones((4, 1)),
    )


def test_dimension_bookkeeping():
    ds = _tiny()
    assert (ds.d, ds.n_seen, ds.n_seen_classes, ds.a) == (2, 3, 2, 4)


def test_arrays_are_read_only():
    ds = _tiny()
    with pytest.raises(ValueError):
        ds.seen_features[0, 0] = 1.0


def test_rejects_double_label(tmp_path):
    ds = _tiny()
    manifest = save_dataset(ds, tmp_path)
    write_matrix(tmp_path / "seen_labels.csv", [[1, 1], [0, 1], [0, 1]])
    with pytest.raises(DatasetError, match="invalid one-hot label"):
        load_dataset(manifest)


def test_rejects_nan_with_position(tmp_path):
    manifest = save_dataset(_tiny(), tmp_path)
    (tmp_path / "seen_features.csv").write_text("0.0,1.0,2.0\n3.0,nan,5.0\n")
    with pytest.raises(DatasetError, match=r"non-finite value at \(1,1\)"):
        load_dataset(manifest)


def test_missing_matrix_file(tmp_path):
    manifest = save_dataset(_tiny(), tmp_path)
    (tmp_path / "unseen_semantics.csv").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(manifest)


def test_manifest_dimension_mismatch(tmp_path):
    manifest = save_dataset(_tiny(), tmp_path)
    meta = json.loads(manifest.read_text())
    meta["matrices"]["seen_features"]["rows"] = 3
    manifest.write_text(json.dumps(meta))
    with pytest.raises(DimensionError):
        load_dataset(manifest)


def test_overlapping_category_ids_rejected():
    with pytest.raises(DatasetError, match="overlap"):
        ZslDataset(
            seen_features=np.zeros((2, 1)),
            seen_labels=one_hot([0], 1),
            seen_semantics=np.ones((3, 1)),
            unseen_features=np.zeros((2, 1)),
            unseen_semantics=np.ones((3, 1)),
            seen_categories=("cat",),
            unseen_categories=("cat",),
        )


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_synthetic(SyntheticSpec(5, 3, 3, 2, 4, 0.4, 0.7, seed=9))
    back = load_dataset(save_dataset(ds, tmp_path))
    for role in ("seen_features", "seen_labels", "seen_semantics", "unseen_features", "unseen_semantics", "unseen_labels"):
        assert np.array_equal(getattr(ds, role), getattr(back, role))
    assert back.seen_categories == ds.seen_categories
    assert back.unseen_categories == ds.unseen_categories


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=12))
def test_csv_round_trip_any_float(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    M = np.array(values).reshape(1, -1)
    write_matrix(path, M)
    assert np.array_equal(read_matrix(path, 1, len(values)), M)


def test_empty_matrix_round_trip(tmp_path):
    write_matrix(tmp_path / "e.csv", np.zeros((3, 0)))
    assert read_matrix(tmp_path / "e.csv", 3, 0).shape == (3, 0)


def test_blocks_round_trip(tmp_path):
    blocks = {"W": np.arange(6.0).reshape(2, 3) / 7, "b": np.array([[1.5, -2.0]])}
    save_blocks(tmp_path / "m.txt", "demo", {"x": 1}, blocks)
    method, meta, back = load_blocks(tmp_path / "m.txt")
    assert method == "demo" and meta == {"x": 1}
    assert all(np.array_equal(blocks[k], back[k]) for k in blocks)


# synthetic generator ---------------------------------------------------------


def test_noiseless_instances_of_a_category_coincide():
    ds = generate_synthetic(SyntheticSpec(6, 4, 3, 2, 5, mapping_drift=0.0, noise_sigma=0.0, seed=2))
    y = ds.seen_label_indices
    for c in range(3):
        block = ds.seen_features[:, y == c]
        assert np.array_equal(block, np.repeat(block[:, :1], block.shape[1], axis=1))


def test_same_seed_bit_identical_different_seed_differs():
    spec = SyntheticSpec(6, 4, 3, 2, 5, 0.3, 0.2, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.seen_features, b.seen_features)
    assert np.array_equal(a.unseen_features, b.unseen_features)
    c = generate_synthetic(SyntheticSpec(6, 4, 3, 2, 5, 0.3, 0.2, seed=8))
    assert not np.array_equal(a.seen_features, c.seen_features)


def test_semantics_nonnegative_unit_norm():
    ds = generate_synthetic(SyntheticSpec(6, 5, 7, 3, 2, seed=1))
    for A in (ds.seen_semantics, ds.unseen_semantics):
        assert (A >= 0).all()
        assert np.allclose(np.linalg.norm(A, axis=0), 1.0)


def test_noiseless_data_gives_perfect_eszsl_training_accuracy():
    # oracle: the trained ESZSL argmax over seen categories
    ds = generate_synthetic(SyntheticSpec(30, 15, 20, 5, 25, 0.0, 0.0, seed=1))
    W = fit_eszsl(ds, 1.0, 1.0).mapping
    pred = argmax_rows(predict_compatibility(W, ds.seen_features, ds.seen_semantics))
    assert np.mean(pred == ds.seen_label_indices) == 1.0


@pytest.mark.parametrize("field,value", [("d", 0), ("per_category", 0), ("mapping_drift", -1.0), ("noise_sigma", float("nan"))])
def test_spec_validation(field, value):
    kwargs = dict(d=3, a=2, n_seen_classes=2, n_unseen_classes=1, per_category=2)
    kwargs[field] = value
    with pytest.raises(DatasetError):
        SyntheticSpec(**kwargs)


# validation split --------------------------------------------------------------


@pytest.mark.parametrize("cs,ct,expected", [(150, 50, 38), (4, 4, 2), (2, 1, 1)])
def test_validation_class_count(cs, ct, expected):
    assert n_validation_classes(cs, ct) == expected


@given(st.integers(2, 60), st.integers(1, 60))
def test_validation_split_partitions_seen_categories(cs, ct):
    ds = ZslDataset(
        seen_features=np.zeros((1, cs)),
        seen_labels=np.eye(cs),
        seen_semantics=np.ones((1, cs)),
        unseen_features=np.zeros((1, 0)),
        unseen_semantics=np.ones((1, ct)),
    )
    if n_validation_classes(cs, ct) >= cs:
        with pytest.raises(DatasetError):
            validation_split(ds)
        return
    train, val = validation_split(ds)
    assert set(train).isdisjoint(val)
    assert sorted(set(train) | set(val)) == list(range(cs))
    assert list(val) == list(range(len(val)))


def test_validation_split_requires_two_seen_categories():
    ds = ZslDataset(
        seen_features=np.zeros((1, 1)),
        seen_labels=np.eye(1),
        seen_semantics=np.ones((1, 1)),
        unseen_features=np.zeros((1, 0)),
        unseen_semantics=np.ones((1, 1)),
    )
    with pytest.raises(DatasetError):
        validation_split(ds)


def test_validation_problem_moves_first_categories_to_unseen(small_dataset):
    inner = validation_problem(small_dataset)
    c_val = n_validation_classes(small_dataset.n_seen_classes, small_dataset.n_unseen_classes)
    assert inner.unseen_categories == small_dataset.seen_categories[:c_val]
    assert inner.seen_categories == small_dataset.seen_categories[c_val:]
    assert inner.n_seen + inner.n_unseen == small_dataset.n_seen
    assert np.array_equal(inner.unseen_semantics, small_dataset.seen_semantics[:, :c_val])
