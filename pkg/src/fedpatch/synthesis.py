"""Client-side trigger synthesis and model patching.

A benign client searches, for some source class s, for the target class
that a small additive pattern can most cheaply push s-samples into, keeps
the binarized pattern in a private bank, and at the end of federated
training fine-tunes its copy of the global model so those patterns no
longer change predictions.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_CLASSES, LabeledDataset, Trigger, apply_trigger
from .errors import ConfigurationError, InputError, OptimizationError, PatchingError, TrainingError
from .nn import ModelSpec, ParamVector, forward_tensor
from .training import sgd_train

log = logging.getLogger(__name__)

UPDATE_RULES = ("sign", "gd")


@dataclass(frozen=True)
class SynthesisConfig:
    omega: float = 0.05
    screening_steps: int = 30
    full_steps: int = 200
    step_size: float = 0.1
    update_rule: str = "sign"
    temperature: float = 1.0
    threshold: float = 0.5
    mask_init: float = 0.0
    class_budget: int = 2
    min_class_samples: int = 1
    max_samples: int = 64
    every: int = 1
    patch_epochs: int = 3
    patch_lr: float = 0.005
    patch_batch_size: int = 64

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigurationError("sparsity weight omega must be >= 0")
        if self.screening_steps < 1 or self.full_steps < 1:
            raise ConfigurationError("optimization budgets must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigurationError("binarization threshold must lie in (0, 1)")
        if self.step_size <= 0 or self.temperature <= 0:
            raise ConfigurationError("step size and temperature must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigurationError(f"update rule must be one of {UPDATE_RULES}")
        if self.class_budget < 1 or self.every < 1 or self.max_samples < 1:
            raise ConfigurationError("class budget, frequency and sample cap must be >= 1")


@dataclass
class BankEntry:
    trigger: Trigger
    round: int
    l_bd: float
    l1: float


@dataclass
class TriggerBank:
    client_id: int
    entries: list = field(default_factory=list)
    cursor: int = 0

    def __len__(self):
        return len(self.entries)

    def add(self, trigger: Trigger, round_index: int, l_bd: float):
        if not trigger.is_binary():
            raise InputError("only finalized (binary-mask) triggers can be banked")
        for e in self.entries:
            if e.round == round_index and (e.trigger.source, e.trigger.target) == (trigger.source, trigger.target):
                raise InputError(f"pair {trigger.source}->{trigger.target} already banked in round {round_index}")
        self.entries.append(BankEntry(trigger, round_index, float(l_bd), trigger.l1()))

    def export(self, directory) -> Path:
        """Write ``bank_<id>.csv`` (one row per trigger) and ``bank_<id>.npz`` (masks, patterns)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        listing = directory / f"bank_{self.client_id}.csv"
        with open(listing, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "round", "source", "target", "l1", "l_bd", "mask_pixels"])
            for i, e in enumerate(self.entries):
                writer.writerow([i, e.round, e.trigger.source, e.trigger.target,
                                 f"{e.l1:.6f}", f"{e.l_bd:.6f}", int(e.trigger.mask.sum())])
        empty = np.zeros((0, 28, 28), np.float32)
        np.savez_compressed(
            directory / f"bank_{self.client_id}.npz",
            masks=np.stack([e.trigger.mask for e in self.entries]) if self.entries else empty,
            patterns=np.stack([e.trigger.pattern for e in self.entries]) if self.entries else empty,
        )
        return listing


def sparsity_loss(trigger: Trigger, omega: float) -> float:
    return float(omega * np.abs(trigger.delta.astype(np.float64)).sum())


def _as_input(images) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)[:, None]))


def _mean_ce(spec, flat, x, label) -> float:
    with torch.no_grad():
        logits = forward_tensor(spec, flat, x)
        y = torch.full((x.shape[0],), int(label), dtype=torch.long)
        return float(F.cross_entropy(logits, y))


def _cap(images: np.ndarray, cap: int, rng) -> np.ndarray:
    if len(images) <= cap:
        return images
    return images[np.sort(rng.choice(len(images), size=cap, replace=False))]


def _run_relaxed(spec, flat, x, targets, cfg: SynthesisConfig, steps: int, step_size: float):
    """Jointly descend one relaxed (mask, pattern) pair per target. Returns (mask, pattern) arrays."""
    k = len(targets)
    n = x.shape[0]
    side = x.shape[-1]
    w_mask = torch.full((k, side, side), float(cfg.mask_init), requires_grad=True)
    w_pat = torch.zeros((k, side, side), requires_grad=True)
    y = torch.as_tensor(np.repeat(np.asarray(targets), n), dtype=torch.long)
    for _ in range(steps):
        mask = torch.sigmoid(w_mask / cfg.temperature)
        delta = mask * torch.sigmoid(w_pat)
        xp = torch.clamp(x.unsqueeze(0) + delta[:, None, None], 0.0, 1.0).reshape(k * n, *x.shape[1:])
        ce = F.cross_entropy(forward_tensor(spec, flat, xp), y, reduction="none").view(k, n).mean(dim=1)
        loss = (ce + cfg.omega * delta.abs().sum(dim=(1, 2))).sum()
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite trigger loss")
        g_mask, g_pat = torch.autograd.grad(loss, (w_mask, w_pat))
        with torch.no_grad():
            if cfg.update_rule == "sign":
                w_mask -= step_size * g_mask.sign()
                w_pat -= step_size * g_pat.sign()
            else:
                w_mask -= step_size * g_mask
                w_pat -= step_size * g_pat
    with torch.no_grad():
        return torch.sigmoid(w_mask / cfg.temperature).numpy(), torch.sigmoid(w_pat).numpy()


def _optimize_many(spec, params: ParamVector, images, source: int, targets, cfg, steps):
    flat = torch.as_tensor(params.data, dtype=torch.float32)
    x = _as_input(images)
    step = cfg.step_size
    for attempt in range(2):
        try:
            masks, patterns = _run_relaxed(spec, flat, x, targets, cfg, steps, step)
            break
        except FloatingPointError:
            if attempt == 1:
                raise OptimizationError(f"trigger optimization for source {source} diverged twice")
            log.warning("trigger optimization for source %d diverged; retrying with step %.3g", source, step / 10)
            step /= 10
    l_clean = _mean_ce(spec, flat, x, source)
    results = []
    for t, mask, pattern in zip(targets, masks, patterns):
        trig = Trigger((mask >= cfg.threshold).astype(np.float32), pattern, source, int(t))
        l_bd = _mean_ce(spec, flat, _as_input(apply_trigger(images, trig)), t)
        l_sp = sparsity_loss(trig, cfg.omega)
        if not all(map(math.isfinite, (l_bd, l_clean, l_sp))):
            raise OptimizationError(f"non-finite final loss for pair {source}->{t}")
        results.append((trig, {"bd": l_bd, "clean": l_clean, "sparsity": l_sp, "total": l_bd + l_clean + l_sp}))
    return results


def optimize_trigger(spec: ModelSpec, params: ParamVector, class_images, source: int, target: int,
                     cfg: SynthesisConfig, budget: Optional[int] = None, rng=None):
    """Fit a mask/pattern pair pushing class-``source`` samples to ``target``.

    Returns the binarized trigger and its post-binarization losses
    (``bd``, ``clean``, ``sparsity``, ``total``).
    """
    if len(class_images) == 0:
        raise InputError("no source-class samples to optimize over")
    if source == target:
        raise InputError("source and target classes must differ")
    rng = rng if rng is not None else np.random.default_rng(0)
    images = _cap(np.asarray(class_images, dtype=np.float32), cfg.max_samples, rng)
    return _optimize_many(spec, params, images, source, [target], cfg, budget or cfg.full_steps)[0]


def screen_targets(spec, params, class_images, source: int, classes, cfg: SynthesisConfig, rng=None) -> dict:
    """Screening-budget score L_bd + L_clean for every candidate target."""
    rng = rng if rng is not None else np.random.default_rng(0)
    candidates = sorted(int(c) for c in classes if c != source)
    images = _cap(np.asarray(class_images, dtype=np.float32), cfg.max_samples, rng)
    results = _optimize_many(spec, params, images, source, candidates, cfg, cfg.screening_steps)
    return {t: losses["bd"] + losses["clean"] for t, (_, losses) in zip(candidates, results)}


def select_target(spec, params, class_images, source: int, classes, cfg: SynthesisConfig, rng=None) -> int:
    """Most likely backdoor target for ``source``; ties go to the smallest class id."""
    candidates = sorted({int(c) for c in classes} - {source})
    if not candidates:
        raise InputError("need at least two classes to pick a target")
    if len(candidates) == 1:
        return candidates[0]
    scores = screen_targets(spec, params, class_images, source, candidates, cfg, rng)
    return min(candidates, key=lambda t: (scores[t], t))


def synthesize_round(spec, params: ParamVector, local: LabeledDataset, cfg: SynthesisConfig,
                     bank: TriggerBank, round_index: int, rng=None,
                     num_classes: int = NUM_CLASSES) -> TriggerBank:
    """Bank one finalized trigger for each of the next ``class_budget`` eligible source classes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    counts = local.class_counts()
    eligible = []
    for step in range(num_classes):
        c = (bank.cursor + step) % num_classes
        if counts[c] == 0:
            continue
        if counts[c] < cfg.min_class_samples:
            log.info("client %d: class %d has %d samples, skipping synthesis", bank.client_id, c, counts[c])
            continue
        eligible.append(c)
    chosen = eligible[: cfg.class_budget]
    if chosen:
        bank.cursor = (chosen[-1] + 1) % num_classes
    frozen = params.data.copy()
    for s in chosen:
        images = local.images[local.labels == s]
        t = select_target(spec, params, images, s, range(num_classes), cfg, rng)
        trig, losses = optimize_trigger(spec, params, images, s, t, cfg, cfg.full_steps, rng)
        bank.add(trig, round_index, losses["bd"])
        log.debug("client %d round %d: %d->%d l_bd=%.4f pixels=%d", bank.client_id, round_index, s, t,
                  losses["bd"], int(trig.mask.sum()))
    assert np.array_equal(frozen, params.data), "synthesis must not modify the model"
    return bank


def build_patch_dataset(bank: TriggerBank, local: LabeledDataset) -> LabeledDataset:
    """Every banked trigger applied to the local samples of its source class, true labels kept."""
    images, labels = [], []
    for e in bank.entries:
        sel = local.labels == e.trigger.source
        if not sel.any():
            continue
        images.append(apply_trigger(local.images[sel], e.trigger))
        labels.append(local.labels[sel])
    if not images:
        return LabeledDataset.empty()
    return LabeledDataset(np.concatenate(images), np.concatenate(labels))


def patch_model(spec, params: ParamVector, clean: LabeledDataset, patchset: LabeledDataset,
                epochs: int, lr: float, batch_size: int = 64, rng=None) -> ParamVector:
    """Fine-tune on clean + patch samples with the two-term (clean mean + patch mean) loss."""
    if len(clean) == 0:
        raise InputError("patching needs clean local data")
    rng = rng if rng is not None else np.random.default_rng(0)
    joint = LabeledDataset.concat(clean, patchset)
    try:
        return sgd_train(spec, params, joint, epochs=epochs, lr=lr, batch_size=batch_size, rng=rng, two_term=True)
    except TrainingError as exc:
        raise PatchingError(str(exc)) from exc
