import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from enaet.data import (
    DataError,
    LabeledSet,
    SyntheticConfig,
    UnlabeledSet,
    augment_batch,
    load_dataset,
    make_shapes,
    make_synthetic,
    nearest_class_mean_accuracy,
    save_dataset,
    split_labels,
    standard_augment,
)


def _pool(n_per_class=20, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    return LabeledSet(rng.random((len(labels), 4, 4, 3)), labels)


def test_split_balanced_250_of_10():
    pool = _pool(30)
    s = split_labels(pool, pool, 250, seed=0)
    assert np.bincount(s.labeled.labels).tolist() == [25] * 10
    assert len(s.unlabeled) == len(pool) - 250


def test_split_all_labels_leaves_unlabeled_empty():
    pool = _pool(5)
    s = split_labels(pool, pool, len(pool), seed=1)
    assert len(s.unlabeled) == 0


def test_split_deterministic_and_disjoint():
    pool = _pool()
    a, b = split_labels(pool, pool, 40, 7), split_labels(pool, pool, 40, 7)
    assert np.array_equal(a.labeled_indices, b.labeled_indices)
    assert not np.array_equal(a.labeled_indices, split_labels(pool, pool, 40, 8).labeled_indices)


def test_split_infeasible():
    pool = _pool(2)
    with pytest.raises(DataError):
        split_labels(pool, pool, 5, 0)
    with pytest.raises(DataError):
        split_labels(pool, pool, len(pool) + 1, 0)


def test_unlabeled_has_no_label_field():
    assert not hasattr(UnlabeledSet(np.zeros((1, 2, 2, 3))), "labels")


def test_metadata_channel_stats():
    pool = _pool()
    s = split_labels(pool, pool, 20, 0)
    np.testing.assert_allclose(s.metadata["mean"], pool.images.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(s.metadata["std"], pool.images.std(axis=(0, 1, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_split_balance_property(per_class, seed):
    pool = _pool(8, classes=5)
    s = split_labels(pool, pool, per_class * 5, seed)
    assert np.bincount(s.labeled.labels, minlength=5).tolist() == [per_class] * 5
    assert len(np.intersect1d(s.labeled_indices, np.flatnonzero(np.ones(len(pool))))) == per_class * 5


def test_augment_identity_and_double_flip():
    img = np.random.default_rng(0).random((6, 6, 3))
    assert np.array_equal(standard_augment(img, flip=False, shift=(0, 0)), img)
    once = standard_augment(img, flip=True, shift=(0, 0))
    assert np.array_equal(standard_augment(once, flip=True, shift=(0, 0)), img)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_shape_and_range(seed):
    img = np.random.default_rng(seed).random((8, 8, 3))
    out = standard_augment(img, np.random.default_rng(seed), max_shift=4)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_augment_batch_matches_single_image_version():
    imgs = np.random.default_rng(1).random((5, 8, 8, 3))
    rng = np.random.default_rng(3)
    out = augment_batch(torch.as_tensor(imgs).permute(0, 3, 1, 2), rng, max_shift=2).permute(0, 2, 3, 1).numpy()
    rng = np.random.default_rng(3)
    flips = rng.random(5) < 0.5
    shifts = rng.integers(-2, 3, size=(5, 2))
    for i in range(5):
        ref = standard_augment(imgs[i], flip=bool(flips[i]), shift=tuple(int(v) for v in shifts[i]))
        np.testing.assert_array_equal(out[i], ref)


def test_synthetic_deterministic_and_in_range():
    cfg = SyntheticConfig(image_size=12, train_per_class=5, test_per_class=3)
    a, b = make_synthetic(cfg, 4, n_labels=8), make_synthetic(cfg, 4, n_labels=8)
    assert np.array_equal(a.test.images, b.test.images) and np.array_equal(a.labeled.images, b.labeled.images)
    assert a.test.images.min() >= 0 and a.test.images.max() <= 1
    assert a.image_shape == (12, 12, 3) and a.num_classes == 4


def test_synthetic_learnable_by_class_means():
    cfg = SyntheticConfig()
    rng = np.random.default_rng(0)
    train, test = make_shapes(cfg, cfg.train_per_class, rng), make_shapes(cfg, cfg.test_per_class, rng)
    assert nearest_class_mean_accuracy(train, test) >= 0.8


def test_synthetic_shapes_stay_in_frame():
    # widest extent: radius 0.45 * scale 1.2, centre jitter 0.08 + translation 0.2
    cfg = SyntheticConfig()
    assert cfg.radius_range[1] * 1.2 * np.sqrt(2) * 0.8 + cfg.center_jitter + 0.2 < 1.0


def test_invalid_synthetic_config():
    with pytest.raises(DataError):
        make_synthetic(SyntheticConfig(num_classes=9))


def test_directory_roundtrip(tmp_path):
    cfg = SyntheticConfig(image_size=8, train_per_class=4, test_per_class=2)
    rng = np.random.default_rng(0)
    train, test = make_shapes(cfg, 4, rng), make_shapes(cfg, 2, rng)
    save_dataset(tmp_path, {"train": train, "test": test})
    s = load_dataset(tmp_path, 8, seed=0)
    assert len(s.labeled) == 8 and len(s.unlabeled) == 8 and len(s.test) == 8
    np.testing.assert_allclose(s.test.images, np.round(test.images * 255) / 255, atol=1e-12)
    assert np.array_equal(s.test.labels, test.labels)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "absent", 4, 0)
