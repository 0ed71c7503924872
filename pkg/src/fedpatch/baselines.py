"""Server-side robust aggregators used as comparison baselines.

Every aggregator returns an aggregated *delta*; the engine adds
``eta * delta`` to the global model. Inputs are sorted by client id
first so the result never depends on arrival order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError
from .nn import ParamVector
from .training import UpdateRecord

log = logging.getLogger(__name__)


@dataclass
class DefenseState:
    kind: str = "none"
    history: dict = field(default_factory=dict)
    prev_global_delta: Optional[ParamVector] = None
    last_weights: dict = field(default_factory=dict)
    last_admitted: tuple = ()


def _stack(updates):
    if not updates:
        raise InputError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    layout = ordered[0].delta.layout
    for u in ordered[1:]:
        ordered[0].delta.check_layout(u.delta)
    X = np.stack([u.delta.data.astype(np.float64) for u in ordered])
    return ordered, X, layout


def _out(vec, layout, dtype) -> ParamVector:
    return ParamVector(vec.astype(dtype), layout)


def mean_delta(updates) -> ParamVector:
    ordered, X, layout = _stack(updates)
    return _out(X.mean(axis=0), layout, ordered[0].delta.data.dtype)


def median_krum(updates, f: int) -> ParamVector:
    """Coordinate median over the n - f updates with the lowest Krum scores."""
    ordered, X, layout = _stack(updates)
    n = len(ordered)
    if n < 2 * f + 3:
        log.warning("median_krum: n=%d < 2f+3 with f=%d; using the plain coordinate median", n, f)
        return _out(np.median(X, axis=0), layout, ordered[0].delta.data.dtype)
    sq = np.sum(X ** 2, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    np.fill_diagonal(dist, np.inf)
    neighbours = n - f - 2
    scores = np.sort(dist, axis=1)[:, :neighbours].sum(axis=1)
    chosen = np.argsort(scores, kind="stable")[: n - f]
    return _out(np.median(X[chosen], axis=0), layout, ordered[0].delta.data.dtype)


def _cosine_matrix(X):
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = X / safe[:, None]
    cs = unit @ unit.T
    return np.clip(cs, -1.0, 1.0)


def foolsgold_weights(histories: np.ndarray, kappa: float = 1.0) -> np.ndarray:
    """Per-client credit from pairwise cosine similarity of update histories."""
    n = histories.shape[0]
    if n == 1:
        return np.ones(1)
    cs = _cosine_matrix(histories) - np.eye(n)
    maxcs = cs.max(axis=1)
    # pardoning: damp similarity towards clients that look less sybil-like
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    if wv.max() <= 0:
        return np.zeros(n)
    wv = wv / wv.max()
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = kappa * (np.log(wv / (1.0 - wv)) + 0.5)
    wv[~np.isfinite(wv) & (wv > 0)] = 1.0
    return np.clip(np.nan_to_num(wv, nan=0.0, neginf=0.0), 0.0, 1.0)


def foolsgold(updates, state: DefenseState, kappa: float = 1.0):
    """Weighted mean of current deltas; weights shrink for clients with look-alike histories."""
    ordered, X, layout = _stack(updates)
    for u, row in zip(ordered, X):
        prev = state.history.get(u.client_id)
        state.history[u.client_id] = row.copy() if prev is None else prev + row
    hist = np.stack([state.history[u.client_id] for u in ordered])
    w = foolsgold_weights(hist, kappa)
    state.last_weights = {u.client_id: float(wi) for u, wi in zip(ordered, w)}
    if w.sum() <= 0:
        agg = np.zeros(X.shape[1])
    else:
        agg = (w[:, None] * X).sum(axis=0) / w.sum()
    return _out(agg, layout, ordered[0].delta.data.dtype), state


def majority_cluster(dist: np.ndarray, min_size: int) -> np.ndarray:
    """Indices of the first group reaching ``min_size`` under single linkage on
    mutual-reachability distance (core distance = distance to the
    ``min_size - 1``-th nearest neighbour). Empty if no such group exists."""
    n = dist.shape[0]
    if min_size > n or n == 0:
        return np.zeros(0, dtype=np.int64)
    if min_size <= 1:
        return np.arange(n)
    off = dist + np.diag(np.full(n, np.inf))
    core = np.sort(off, axis=1)[:, min_size - 2]
    reach = np.maximum(np.maximum(core[:, None], core[None, :]), dist)
    iu, ju = np.triu_indices(n, k=1)
    order = np.lexsort((ju, iu, reach[iu, ju]))
    parent = list(range(n))
    size = [1] * n

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    level = None
    for e in order:
        weight = reach[iu[e], ju[e]]
        if level is not None and weight > level:
            break
        a, b = find(iu[e]), find(ju[e])
        if a != b:
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            if level is None and size[a] >= min_size:
                level = weight
    if level is None:
        return np.zeros(0, dtype=np.int64)
    roots = np.array([find(i) for i in range(n)])
    sizes = np.bincount(roots, minlength=n)
    # ties at the cut level can in principle leave two groups; keep the larger
    best = np.argmax(sizes)
    return np.flatnonzero(roots == best)


def flame(updates, state: DefenseState, noise_lambda: float = 0.001, rng=None) -> ParamVector:
    """Cosine-distance majority filter, median-norm clipping, Gaussian noise."""
    ordered, X, layout = _stack(updates)
    n = len(ordered)
    admitted = majority_cluster(1.0 - _cosine_matrix(X), n // 2 + 1) if n >= 3 else np.zeros(0, np.int64)
    if admitted.size == 0:
        log.warning("flame: no majority cluster among %d updates; clipping only", n)
        admitted = np.arange(n)
    state.last_admitted = tuple(ordered[i].client_id for i in admitted)
    norms = np.linalg.norm(X, axis=1)
    bound = float(np.median(norms))
    scale = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    agg = (X[admitted] * scale[admitted, None]).mean(axis=0)
    if noise_lambda > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        agg = agg + rng.normal(0.0, noise_lambda * bound, size=agg.shape)
    return _out(agg, layout, ordered[0].delta.data.dtype)


def norm_clip(updates, bound: float) -> ParamVector:
    if bound <= 0:
        raise InputError("clipping bound must be positive")
    ordered, X, layout = _stack(updates)
    norms = np.linalg.norm(X, axis=1)
    scale = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    return _out((X * scale[:, None]).mean(axis=0), layout, ordered[0].delta.data.dtype)
