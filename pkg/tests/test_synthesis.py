import csv

import numpy as np
import pytest

from conftest import blob_dataset, needs_mnist
from fedpatch.data import LabeledDataset, Trigger, apply_trigger, default_trigger
from fedpatch.errors import ConfigurationError, InputError
from fedpatch.metrics import evaluate_mta
from fedpatch.nn import Activation, Conv, Dense, MaxPool, ModelSpec, init_params, predict
from fedpatch.synthesis import (SynthesisConfig, TriggerBank, build_patch_dataset, optimize_trigger, patch_model,
                                select_target, sparsity_loss, synthesize_round)
from fedpatch.training import sgd_train

TINY = ModelSpec((Conv(1, 4, 3), Activation("relu"), MaxPool(4), Dense(4 * 7 * 7, 10)), (1, 28, 28), 10)
FAST = SynthesisConfig(screening_steps=3, full_steps=5, max_samples=8, min_class_samples=2)


def _binary(pixels, source=1, target=2, value=1.0):
    mask = np.zeros((28, 28), np.float32)
    mask.flat[list(pixels)] = 1.0
    return Trigger(mask, np.full((28, 28), value, np.float32), source, target)


def test_config_rejects_bad_values():
    for bad in (dict(omega=-1), dict(full_steps=0), dict(threshold=1.0), dict(step_size=0),
                dict(update_rule="adam"), dict(class_budget=0)):
        with pytest.raises(ConfigurationError):
            SynthesisConfig(**bad)


def test_sparsity_loss_exact():
    assert sparsity_loss(_binary([0, 5, 9], value=0.5), 0.05) == pytest.approx(0.05 * 1.5)
    assert sparsity_loss(_binary([]), 10.0) == 0.0


def test_bank_rules(tmp_path):
    bank = TriggerBank(3)
    relaxed = Trigger(np.full((28, 28), 0.4), np.ones((28, 28)), 1, 2)
    with pytest.raises(InputError):
        bank.add(relaxed, 1, 0.1)
    bank.add(_binary([1, 2]), 1, 0.25)
    with pytest.raises(InputError):
        bank.add(_binary([3]), 1, 0.5)
    bank.add(_binary([3]), 2, 0.5)
    bank.add(_binary([4], source=5, target=0), 2, 0.75)
    assert len(bank) == 3
    listing = bank.export(tmp_path)
    rows = list(csv.DictReader(open(listing)))
    assert [(r["round"], r["source"], r["target"], r["mask_pixels"]) for r in rows] == [
        ("1", "1", "2", "2"), ("2", "1", "2", "1"), ("2", "5", "0", "1")]
    assert float(rows[0]["l1"]) == 2.0 and float(rows[2]["l_bd"]) == 0.75
    arrays = np.load(tmp_path / "bank_3.npz")
    assert arrays["masks"].shape == (3, 28, 28) and arrays["patterns"].shape == (3, 28, 28)
    TriggerBank(9).export(tmp_path)
    assert np.load(tmp_path / "bank_9.npz")["masks"].shape == (0, 28, 28)


def test_optimize_trigger_input_checks():
    p = init_params(TINY, 0)
    with pytest.raises(InputError):
        optimize_trigger(TINY, p, np.zeros((0, 28, 28)), 1, 2, FAST)
    with pytest.raises(InputError):
        optimize_trigger(TINY, p, np.zeros((4, 28, 28)), 2, 2, FAST)


def test_huge_sparsity_weight_empties_mask():
    ds = blob_dataset(6)
    trig, losses = optimize_trigger(TINY, init_params(TINY, 0), ds.of_class(1).images, 1, 4,
                                    SynthesisConfig(omega=1e6, full_steps=20))
    assert trig.mask.sum() == 0
    assert trig.is_binary() and losses["sparsity"] == 0.0
    assert losses["total"] == pytest.approx(losses["bd"] + losses["clean"])


def test_two_class_selection_needs_no_screening():
    p = init_params(TINY, 0)
    assert select_target(TINY, p, np.zeros((3, 28, 28)), 4, [4, 8], FAST) == 8
    with pytest.raises(InputError):
        select_target(TINY, p, np.zeros((3, 28, 28)), 4, [4], FAST)


def test_synthesize_round_budget_and_rotation():
    ds = blob_dataset(4)
    ds = ds.subset(np.flatnonzero(ds.labels != 6))  # class 6 absent
    few = np.flatnonzero(ds.labels == 2)[:1]  # class 2 below the sample floor
    ds = ds.subset(np.concatenate([np.flatnonzero(ds.labels != 2), few]))
    p = init_params(TINY, 0)
    before = p.data.copy()
    bank = TriggerBank(0)
    sources = []
    for r in range(1, 5):
        synthesize_round(TINY, p, ds, FAST, bank, r, np.random.default_rng(r))
        this_round = [e for e in bank.entries if e.round == r]
        assert len(this_round) == FAST.class_budget
        sources += [e.trigger.source for e in this_round]
    assert sources == [0, 1, 3, 4, 5, 7, 8, 9]
    assert np.array_equal(p.data, before)
    assert all(e.trigger.is_binary() and e.trigger.source != e.trigger.target for e in bank.entries)


def test_patch_dataset_counts_and_labels():
    ds = blob_dataset(5)
    bank = TriggerBank(0)
    bank.add(_binary([0], source=1, target=2), 1, 0.0)
    bank.add(_binary([1], source=1, target=3), 2, 0.0)
    bank.add(_binary([2], source=4, target=0), 2, 0.0)
    patch = build_patch_dataset(bank, ds)
    assert len(patch) == 15
    assert np.bincount(patch.labels, minlength=10).tolist() == [0, 10, 0, 0, 5, 0, 0, 0, 0, 0]
    assert np.all(patch.images[:5].reshape(5, -1)[:, 0] == 1.0)
    assert len(build_patch_dataset(TriggerBank(1), ds)) == 0


def test_patch_with_zero_lr_is_identity():
    ds = blob_dataset(3)
    p = init_params(TINY, 0)
    bank = TriggerBank(0)
    bank.add(_binary([0]), 1, 0.0)
    out = patch_model(TINY, p, ds, build_patch_dataset(bank, ds), epochs=2, lr=0.0)
    assert np.array_equal(out.data, p.data)
    with pytest.raises(InputError):
        patch_model(TINY, p, LabeledDataset.empty(), ds, epochs=1, lr=0.1)


# ---- plant a known backdoor, then find and remove it ----

PLANT_SPEC = ModelSpec((Conv(1, 8, 5), Activation("relu"), MaxPool(2), Conv(8, 16, 5), Activation("relu"),
                        MaxPool(2), Dense(784, 10)), (1, 28, 28), 10)
SOURCE, TARGET = 7, 0


def _plant(train, seed, poison=True):
    rng = np.random.default_rng(seed)
    sub = train.subset(rng.choice(len(train), 8000, replace=False))
    base = default_trigger(seed, TARGET)
    trig = Trigger(base.mask, base.pattern, SOURCE, TARGET)
    data = sub
    if poison:
        idx = np.flatnonzero(sub.labels == SOURCE)[: int((sub.labels == SOURCE).sum()) // 2]
        data = LabeledDataset(np.concatenate([sub.images, apply_trigger(sub.images[idx], trig)]),
                              np.concatenate([sub.labels, np.full(len(idx), TARGET)]))
    p = sgd_train(PLANT_SPEC, init_params(PLANT_SPEC, seed), data, epochs=5, lr=0.05, batch_size=64, rng=rng)
    return p, sub, trig


@pytest.fixture(scope="module")
def planted(mnist):
    train, test = mnist
    cfg = SynthesisConfig()
    held = test.of_class(SOURCE)
    results = []
    for seed in range(5):
        p, sub, trig = _plant(train, seed)
        local = sub.subset(np.arange(2000))
        imgs = local.images[local.labels == SOURCE]
        rng = np.random.default_rng(seed)
        chosen = select_target(PLANT_SPEC, p, imgs, SOURCE, range(10), cfg, rng)
        found, losses = optimize_trigger(PLANT_SPEC, p, imgs, SOURCE, chosen, cfg, rng=rng)
        bank = TriggerBank(0)
        bank.add(found, 1, losses["bd"])
        patched = patch_model(PLANT_SPEC, p, local, build_patch_dataset(bank, local), cfg.patch_epochs,
                              cfg.patch_lr, cfg.patch_batch_size, np.random.default_rng(seed))

        def ba(params):
            return float(np.mean(predict(PLANT_SPEC, params, apply_trigger(held.images, trig)) == TARGET))

        results.append(dict(
            chosen=chosen, losses=losses,
            hit=float(np.mean(predict(PLANT_SPEC, p, apply_trigger(held.images, found)) == chosen)),
            ba_before=ba(p), ba_after=ba(patched),
            mta_before=evaluate_mta((PLANT_SPEC, p), test), mta_after=evaluate_mta((PLANT_SPEC, patched), test)))
    return results


@needs_mnist
@pytest.mark.slow
def test_planted_target_is_selected(planted):
    assert sum(r["chosen"] == TARGET for r in planted) >= 4


@needs_mnist
@pytest.mark.slow
def test_recovered_trigger_fires(planted):
    for r in planted:
        assert r["hit"] >= 0.8


@needs_mnist
@pytest.mark.slow
def test_patching_removes_planted_backdoor(planted):
    for r in planted:
        assert r["ba_before"] > 0.9
        assert r["ba_after"] <= 0.1 and r["ba_after"] < r["ba_before"]
        assert r["mta_after"] >= r["mta_before"] - 0.02


@needs_mnist
@pytest.mark.slow
def test_backdoored_model_is_easier_to_trigger(mnist, planted):
    train, _ = mnist
    clean, sub, _ = _plant(train, 0, poison=False)
    imgs = sub.images[:2000][sub.labels[:2000] == SOURCE]
    _, clean_losses = optimize_trigger(PLANT_SPEC, clean, imgs, SOURCE, TARGET, SynthesisConfig(),
                                       rng=np.random.default_rng(0))
    assert planted[0]["losses"]["bd"] + 0.5 < clean_losses["bd"]
