"""Mini-batch SGD over a flat parameter tensor.

Shared by benign clients, attackers and the patching step. When
``two_term`` is set, every batch minimises ``mean(clean) + mean(flagged)``
where flagged samples are those marked ``poisoned`` in the dataset.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import TrainingError
from .nn import ModelSpec, ParamVector, forward_tensor


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Counter-style stream splitting: (master, purpose, round, client, ...) -> generator."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *(int(k) for k in keys)]))


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 3
    lr: float = 0.01
    batch_size: int = 64


@dataclass
class UpdateRecord:
    client_id: int
    round: int
    delta: ParamVector
    num_samples: int

    def __post_init__(self):
        if not self.delta.is_finite():
            raise TrainingError("update contains non-finite values", self.client_id)


def two_term_loss(per_sample: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
    clean = ~flags
    loss = per_sample.new_zeros(())
    if clean.any():
        loss = loss + per_sample[clean].mean()
    if flags.any():
        loss = loss + per_sample[flags].mean()
    return loss


def sgd_train(
    spec: ModelSpec,
    start: ParamVector,
    data: LabeledDataset,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    two_term: bool = False,
    objective: Optional[Callable] = None,
    after_epoch: Optional[Callable[[torch.Tensor, torch.Tensor], None]] = None,
    client_id=None,
) -> ParamVector:
    """Run ``epochs`` passes of shuffled mini-batch SGD and return the final parameters.

    ``objective(task_loss, w, w0)`` replaces the task loss when given.
    ``after_epoch(w, w0)`` may edit ``w`` in place (used for projections).
    """
    if lr == 0 or epochs == 0 or len(data) == 0:
        return start.copy()
    w0 = torch.tensor(start.data, dtype=torch.float32)
    w = w0.clone().requires_grad_(True)
    x_all = torch.from_numpy(np.ascontiguousarray(data.images[:, None]))
    y_all = torch.from_numpy(data.labels)
    flags_all = torch.from_numpy(data.second_term_mask())
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start_idx in range(0, n, batch_size):
            idx = torch.from_numpy(order[start_idx:start_idx + batch_size])
            per_sample = F.cross_entropy(forward_tensor(spec, w, x_all[idx]), y_all[idx], reduction="none")
            loss = two_term_loss(per_sample, flags_all[idx]) if two_term else per_sample.mean()
            if objective is not None:
                loss = objective(loss, w, w0)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", client_id)
            (grad,) = torch.autograd.grad(loss, w)
            with torch.no_grad():
                w -= lr * grad
        if after_epoch is not None:
            with torch.no_grad():
                after_epoch(w, w0)
    out = w.detach().numpy().astype(start.data.dtype)
    if not np.all(np.isfinite(out)):
        raise TrainingError("parameters diverged", client_id)
    return ParamVector(out, start.layout)
