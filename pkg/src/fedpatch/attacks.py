"""Malicious client behaviours: MRA, DBA, Neurotoxin and the stealth blend."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import LabeledDataset, Trigger, build_poisoned_dataset
from .errors import ConfigurationError
from .nn import ModelSpec, ParamVector
from .training import LocalTrainConfig, UpdateRecord, sgd_train

ATTACK_KINDS = ("none", "mra", "dba", "neurotoxin")

# amplification used when the config leaves alpha unset
DEFAULT_ALPHA = {"none": 1.0, "mra": 20.0, "dba": 20.0, "neurotoxin": 1.0}


@dataclass
class AttackConfig:
    kind: str = "none"
    target: int = 0
    alpha: Optional[float] = None
    stealth_lambda: float = 1.0
    k_ratio: float = 0.05
    poison_fraction: float = 0.5
    trigger: Optional[Trigger] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA[self.kind]
        if self.alpha < 1:
            raise ConfigurationError("amplification alpha must be >= 1")
        if not 0 <= self.stealth_lambda <= 1:
            raise ConfigurationError("stealth lambda must lie in [0, 1]")
        if not 0 < self.k_ratio < 1:
            raise ConfigurationError("neurotoxin k_ratio must lie in (0, 1)")
        if not 0 < self.poison_fraction <= 1:
            raise ConfigurationError("poison fraction must lie in (0, 1]")


def stealth_objective(poisoned_loss, stealth_distance, lam: float):
    """lam * poisoned_loss + (1 - lam) * stealth_distance (works on floats and tensors)."""
    if not 0 <= lam <= 1:
        raise ConfigurationError("stealth lambda must lie in [0, 1]")
    return lam * poisoned_loss + (1.0 - lam) * stealth_distance


def malicious_local_train(
    spec: ModelSpec,
    global_params: ParamVector,
    clean: LabeledDataset,
    atk: AttackConfig,
    trigger: Trigger,
    train: LocalTrainConfig,
    rng: np.random.Generator,
    *,
    client_id: int = -1,
    round_index: int = 0,
    benign_proxy: Optional[ParamVector] = None,
    after_epoch=None,
) -> UpdateRecord:
    """Train on the clean set with a poisoned share mixed in; returns the raw delta.

    The loss is the sum of the clean-sample mean and the poisoned-sample
    mean. With ``atk.stealth_lambda < 1`` it is blended with the L2 distance
    between the running delta and ``benign_proxy``.
    """
    poisoned = build_poisoned_dataset(clean, trigger, atk.poison_fraction, seed=int(rng.integers(2**31)))
    objective = None
    if atk.stealth_lambda < 1.0:
        proxy = torch.zeros(len(global_params)) if benign_proxy is None else torch.as_tensor(
            benign_proxy.data, dtype=torch.float32)
        lam = atk.stealth_lambda

        def objective(loss, w, w0):
            distance = torch.sqrt(torch.sum((w - w0 - proxy) ** 2) + 1e-12)
            return stealth_objective(loss, distance, lam)

    local = sgd_train(
        spec, global_params, poisoned,
        epochs=train.epochs, lr=train.lr, batch_size=train.batch_size, rng=rng,
        two_term=True, objective=objective, after_epoch=after_epoch, client_id=client_id,
    )
    return UpdateRecord(client_id, round_index, local - global_params, len(poisoned))


def amplify(update: UpdateRecord, alpha: float) -> UpdateRecord:
    if alpha < 1:
        raise ConfigurationError("amplification alpha must be >= 1")
    return UpdateRecord(update.client_id, update.round, update.delta * alpha, update.num_samples)


def dba_split(trigger: Trigger, M: int) -> list:
    """Cut the active mask pixels, in column-major order, into M contiguous pieces."""
    if M < 2:
        raise ConfigurationError("DBA needs at least two attackers")
    cols, rows = np.nonzero(trigger.mask.T)
    if cols.size < M:
        raise ConfigurationError(f"trigger has {cols.size} active pixels, cannot split across {M} attackers")
    parts = []
    for piece_cols, piece_rows in zip(np.array_split(cols, M), np.array_split(rows, M)):
        mask = np.zeros_like(trigger.mask)
        mask[piece_rows, piece_cols] = trigger.mask[piece_rows, piece_cols]
        parts.append(Trigger(mask, trigger.pattern.copy(), trigger.source, trigger.target))
    return parts


def neurotoxin_mask(proxy: np.ndarray, k_ratio: float) -> np.ndarray:
    """Indices of the top ceil(k_ratio * d) entries of |proxy|; ties go to the lowest index."""
    d = proxy.shape[0]
    k = min(d, max(1, math.ceil(k_ratio * d)))
    return np.argsort(-np.abs(proxy), kind="stable")[:k]


def neurotoxin_project(update: UpdateRecord, proxy: ParamVector, k_ratio: float) -> UpdateRecord:
    update.delta.check_layout(proxy)
    out = update.delta.data.copy()
    out[neurotoxin_mask(proxy.data, k_ratio)] = 0
    return UpdateRecord(update.client_id, update.round, ParamVector(out, proxy.layout), update.num_samples)


def neurotoxin_epoch_hook(proxy: ParamVector, k_ratio: float):
    """after_epoch hook that keeps the running delta off the top-|proxy| coordinates."""
    idx = torch.from_numpy(neurotoxin_mask(proxy.data, k_ratio))

    def hook(w, w0):
        w[idx] = w0[idx]

    return hook
