import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import blob_dataset, needs_mnist
from fedpatch.data import (LabeledDataset, Trigger, apply_trigger, build_poisoned_dataset, dataset_paths,
                           default_trigger, load_dataset, load_idx, partition_dirichlet, partition_iid,
                           poison_test_set, subsample, write_idx)
from fedpatch.errors import ConfigurationError, FormatError, InputError


def _write_raw(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I" + "I" * len(dims), magic, *dims))
        fh.write(bytes(payload))


@pytest.fixture
def two_image_fixture(tmp_path):
    pixels = np.zeros((2, 28, 28), np.uint8)
    pixels[0, 0, 0] = 128
    pixels[0, 27, 27] = 255
    pixels[1, 5, 7] = 1
    img, lab = tmp_path / "img", tmp_path / "lab"
    _write_raw(img, 0x803, (2, 28, 28), pixels.tobytes())
    _write_raw(lab, 0x801, (2,), [3, 9])
    return img, lab


def test_idx_fixture_exact_values(two_image_fixture):
    ds = load_idx(*two_image_fixture)
    assert len(ds) == 2
    assert ds.images[0, 0, 0] == np.float32(128) / np.float32(255)
    assert ds.images[0, 27, 27] == 1.0
    assert ds.images[1, 5, 7] == np.float32(1) / np.float32(255)
    assert ds.images.sum() == pytest.approx((128 + 255 + 1) / 255, rel=1e-6)
    np.testing.assert_array_equal(ds.labels, [3, 9])


def test_idx_gzip(two_image_fixture, tmp_path):
    img, lab = two_image_fixture
    for p in (img, lab):
        with open(p, "rb") as src, gzip.open(str(p) + ".gz", "wb") as dst:
            dst.write(src.read())
    a = load_idx(img, lab)
    b = load_idx(str(img) + ".gz", str(lab) + ".gz")
    np.testing.assert_array_equal(a.images, b.images)


def test_idx_wrong_magic(two_image_fixture):
    img, lab = two_image_fixture
    with pytest.raises(FormatError):
        load_idx(img, img)  # image file (0x803) passed as labels
    with pytest.raises(FormatError):
        load_idx(lab, lab)


def test_idx_truncated_and_mismatched(tmp_path, two_image_fixture):
    img, lab = two_image_fixture
    short = tmp_path / "short"
    _write_raw(short, 0x803, (2, 28, 28), bytes(28 * 28 * 2 - 1))
    with pytest.raises(FormatError):
        load_idx(short, lab)
    three = tmp_path / "three"
    _write_raw(three, 0x801, (3,), [1, 2, 3])
    with pytest.raises(FormatError):
        load_idx(img, three)
    header_only = tmp_path / "hdr"
    header_only.write_bytes(b"\x00\x00\x08")
    with pytest.raises(FormatError):
        load_idx(header_only, lab)


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_idx_round_trip(n, seed):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 28, 28)).astype(np.float32) / np.float32(255)
    ds = LabeledDataset(pixels, rng.integers(0, 10, n))
    with tempfile.TemporaryDirectory() as d:
        write_idx(ds, Path(d) / "i", Path(d) / "l")
        back = load_idx(Path(d) / "i", Path(d) / "l")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)


@needs_mnist
def test_mnist_sizes_and_test_poisoning():
    train, test = load_dataset("mnist", "train"), load_dataset("mnist", "test")
    assert len(train) == 60_000 and len(test) == 10_000
    poisoned = poison_test_set(test, default_trigger(0, 0))
    assert len(poisoned) == 10_000 - int((test.labels == 0).sum())
    assert abs(len(poisoned) - 9_020) < 10


def test_dataset_paths_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FEDPATCH_DATA_ROOT", str(tmp_path))
    img, lab = dataset_paths("fashion-mnist", "test")
    assert img.parent == tmp_path / "fashion-mnist"
    assert img.name.startswith("t10k-images")
    with pytest.raises(ConfigurationError):
        dataset_paths("cifar", "train")


def test_dataset_invariants():
    with pytest.raises(InputError):
        LabeledDataset(np.full((1, 28, 28), 1.5), [0])
    with pytest.raises(InputError):
        LabeledDataset(np.zeros((1, 28, 28)), [10])
    with pytest.raises(InputError):
        LabeledDataset(np.zeros((2, 28, 28)), [0])


def test_subsample_size_and_order():
    ds = blob_dataset(10)
    sub = subsample(ds, 0.25, seed=1)
    assert len(sub) == 25
    assert subsample(ds, 1.0, 0) is ds
    a, b = subsample(ds, 0.3, 5), subsample(ds, 0.3, 5)
    np.testing.assert_array_equal(a.images, b.images)


# ---- partitions ----

def _check_partition(plan, n):
    joined = np.concatenate(plan.clients)
    assert joined.size == n
    assert np.array_equal(np.sort(joined), np.arange(n))
    plan.validate()


@given(st.integers(1, 30), st.integers(0, 1000), st.integers(3, 12))
def test_iid_partition_properties(K, seed, per_class):
    ds = blob_dataset(per_class)
    if K > len(ds):
        return
    plan = partition_iid(ds, K, seed)
    _check_partition(plan, len(ds))
    sizes = plan.sizes()
    assert sizes.max() - sizes.min() <= 1
    counts = np.stack([np.bincount(ds.labels[c], minlength=10) for c in plan.clients])
    assert np.all(counts.max(axis=0) - counts.min(axis=0) <= 1)


def test_iid_partition_examples():
    ds = blob_dataset(6)
    plan = partition_iid(ds, 1, 0)
    np.testing.assert_array_equal(plan.clients[0], np.arange(len(ds)))
    a, b, c = partition_iid(ds, 4, 7), partition_iid(ds, 4, 7), partition_iid(ds, 4, 8)
    assert all(np.array_equal(x, y) for x, y in zip(a.clients, b.clients))
    assert not all(np.array_equal(x, y) for x, y in zip(a.clients, c.clients))
    with pytest.raises(ConfigurationError):
        partition_iid(ds, len(ds) + 1, 0)


def test_iid_partition_full_scale_arithmetic():
    labels = np.repeat(np.arange(10), 6000)
    ds = LabeledDataset(np.zeros((60_000, 28, 28), np.float32), labels)
    plan = partition_iid(ds, 100, 0)
    assert np.all(plan.sizes() == 600)
    for c in plan.clients:
        assert np.all(np.bincount(labels[c], minlength=10) == 60)


@given(st.integers(1, 15), st.floats(0.1, 100), st.integers(0, 500))
def test_dirichlet_partition_is_partition(K, alpha, seed):
    ds = blob_dataset(15)
    try:
        plan = partition_dirichlet(ds, K, alpha, seed)
    except ConfigurationError:
        return  # infeasible draw budget is a documented outcome
    _check_partition(plan, len(ds))
    assert np.all(plan.sizes() >= 1)


def test_dirichlet_examples():
    ds = blob_dataset(100)
    plan = partition_dirichlet(ds, 1, 0.3, 0)
    np.testing.assert_array_equal(plan.clients[0], np.arange(len(ds)))
    big = LabeledDataset(np.zeros((20_000, 28, 28), np.float32), np.repeat(np.arange(10), 2000))
    for seed in range(10):
        plan = partition_dirichlet(big, 10, 1000.0, seed)
        for c in range(10):
            share = np.array([np.sum(big.labels[idx] == c) for idx in plan.clients]) / 2000
            assert np.all(np.abs(share - 0.1) <= 0.02)
    plan = partition_dirichlet(big, 20, 0.5, 0)
    _check_partition(plan, len(big))
    assert plan.sizes().max() / plan.sizes().min() > 1.5
    a, b = partition_dirichlet(big, 20, 0.5, 3), partition_dirichlet(big, 20, 0.5, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.clients, b.clients))


def test_dirichlet_infeasible():
    ds = blob_dataset(1, classes=2)
    with pytest.raises(ConfigurationError, match="alpha"):
        partition_dirichlet(ds, 5, 0.5, 0, max_retries=5)


# ---- triggers ----

def _trigger(mask, pattern, source=None, target=0):
    return Trigger(np.asarray(mask, np.float32), np.asarray(pattern, np.float32), source, target)


def test_apply_trigger_examples():
    x = np.random.default_rng(0).random((28, 28)).astype(np.float32)
    zero = _trigger(np.zeros((28, 28)), np.ones((28, 28)))
    assert np.array_equal(apply_trigger(x, zero), x)
    m = np.zeros((28, 28))
    m[0, 0] = 1
    out = apply_trigger(np.zeros((28, 28)), _trigger(m, np.ones((28, 28))))
    assert out[0, 0] == 1.0 and out.sum() == 1.0
    x2 = np.zeros((28, 28), np.float32)
    x2[0, 0] = 0.8
    assert apply_trigger(x2, _trigger(m, np.full((28, 28), 0.5)))[0, 0] == 1.0


@given(st.integers(0, 2**32 - 1))
def test_apply_trigger_range_and_identity_off_mask(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 28, 28)).astype(np.float32)
    mask = (rng.random((28, 28)) < 0.1).astype(np.float32)
    trig = _trigger(mask, rng.random((28, 28)))
    out = apply_trigger(x, trig)
    assert out.min() >= 0 and out.max() <= 1
    off = mask == 0
    assert np.array_equal(out[:, off], x[:, off])


def test_trigger_invariants():
    with pytest.raises(InputError):
        _trigger(np.zeros((28, 28)), np.zeros((28, 28)), source=3, target=3)
    with pytest.raises(InputError):
        _trigger(np.zeros((27, 28)), np.zeros((27, 28)))
    t = default_trigger(0)
    assert t.is_binary() and t.mask.sum() == 25
    assert np.all(t.mask[22:27, 22:27] == 1)
    assert t.pattern[22:27, 22:27].min() >= 0.5
    assert np.all(t.delta[t.mask == 0] == 0)


def test_build_poisoned_dataset_counts():
    ds = blob_dataset(1)  # 10 samples, one per class
    trig = default_trigger(0, target=0)
    half = build_poisoned_dataset(ds, trig, 0.5, seed=0)
    assert half.poisoned.sum() == 5
    assert np.all(half.labels[half.poisoned] == 0)
    assert np.array_equal(half.labels[~half.poisoned], ds.labels[~half.poisoned])
    full = build_poisoned_dataset(ds, trig, 1.0, seed=0)
    assert full.poisoned.all() and np.all(full.labels == 0)
    with pytest.raises(ConfigurationError):
        build_poisoned_dataset(ds, trig, 0.0, 0)


@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_poisoned_label_histogram(fraction, seed):
    ds = blob_dataset(5)
    trig = default_trigger(seed, target=3)
    out = build_poisoned_dataset(ds, trig, fraction, seed)
    m = int(out.poisoned.sum())
    assert m == int(np.ceil(fraction * len(ds)))
    before = np.bincount(ds.labels, minlength=10)
    moved = np.bincount(ds.labels[out.poisoned], minlength=10)
    after = before - moved
    after[3] += m
    assert np.array_equal(np.bincount(out.labels, minlength=10), after)
    # poisoned pixels differ only inside the trigger mask
    diff = out.images != ds.images
    assert not diff[:, trig.mask == 0].any()


def test_poison_test_set():
    ds = blob_dataset(3)
    trig = default_trigger(0, target=4)
    out = poison_test_set(ds, trig)
    assert len(out) == 27 and not np.any(out.labels == 4)
    no_target = ds.subset(np.flatnonzero(ds.labels != 4))
    assert len(poison_test_set(no_target, trig)) == len(no_target)
    only = ds.of_class(4)
    with pytest.raises(InputError):
        poison_test_set(only, trig)
    assert not (out.images != no_target.images)[:, trig.mask == 0].any()
