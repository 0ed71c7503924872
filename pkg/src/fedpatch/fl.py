"""Federated rounds: client sampling, local training, aggregation, evaluation.

Every random draw comes from ``derive_rng(seed, purpose, round, client)`` so
a run is reproducible and independent of the order clients are processed in.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attacks import AttackConfig, amplify, dba_split, malicious_local_train, neurotoxin_epoch_hook, neurotoxin_project
from .baselines import DefenseState, flame, foolsgold, median_krum, norm_clip
from .config import ExperimentConfig
from .data import (LabeledDataset, Trigger, default_trigger, load_idx, partition_dirichlet, partition_iid,
                   subsample)
from .errors import ConfigurationError, FedPatchError, InputError
from .metrics import MetricsRow, evaluate_ba, evaluate_mta, write_metrics
from .nn import ModelSpec, ParamVector, init_params, reference_cnn
from .synthesis import TriggerBank, build_patch_dataset, patch_model, synthesize_round
from .training import LocalTrainConfig, UpdateRecord, derive_rng, sgd_train

log = logging.getLogger(__name__)

# stream ids for derive_rng
SUBSAMPLE, PARTITION, ADVERSARIES, TRIGGER, INIT, SAMPLE, TRAIN, SYNTH, NOISE, PATCH, EVAL = range(1, 12)


@dataclass(frozen=True)
class RoundConfig:
    num_clients: int
    adversaries: frozenset
    sample_range: tuple = (0.6, 0.9)
    local: LocalTrainConfig = LocalTrainConfig()
    global_lr: float = 1.0
    rounds: int = 50
    seed: int = 0
    always_sample_adversaries: bool = False

    def __post_init__(self):
        lo, hi = self.sample_range
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError("sampling range needs 0 < lo <= hi <= 1")
        if self.local.epochs < 1 or self.rounds < 1:
            raise ConfigurationError("local epochs and rounds must be >= 1")
        if any(not 0 <= a < self.num_clients for a in self.adversaries):
            raise ConfigurationError("adversary ids must lie in 0..K-1")


def sample_clients(K: int, sample_range, rng: np.random.Generator, always=()) -> np.ndarray:
    """Draw f ~ U[lo, hi] and pick ceil(f*K) distinct clients; ids in ``always`` are forced in."""
    lo, hi = sample_range
    if not 0 < lo <= hi <= 1:
        raise ConfigurationError("sampling range needs 0 < lo <= hi <= 1")
    f = rng.uniform(lo, hi) if hi > lo else lo
    n = min(K, max(1, math.ceil(f * K - 1e-9)))
    chosen = rng.choice(K, size=n, replace=False)
    if len(always):
        forced = np.asarray(sorted(always), dtype=np.int64)
        rest = [c for c in chosen if c not in set(forced.tolist())]
        chosen = np.concatenate([forced, np.asarray(rest, dtype=np.int64)])[: max(n, forced.size)]
    return np.sort(chosen)


def local_train(spec: ModelSpec, global_params: ParamVector, data: LabeledDataset, cfg: LocalTrainConfig,
                rng: np.random.Generator, client_id: int = -1, round_index: int = 0) -> UpdateRecord:
    if len(data) == 0:
        raise InputError(f"client {client_id} has no local data")
    local = sgd_train(spec, global_params, data, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                      rng=rng, client_id=client_id)
    return UpdateRecord(client_id, round_index, local - global_params, len(data))


def fedavg(global_params: ParamVector, updates, eta: float) -> ParamVector:
    """theta + eta * mean(delta); the mean is over the updates received this round."""
    if not updates:
        raise InputError("fedavg needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = np.zeros(len(global_params), dtype=np.float64)
    for u in ordered:
        global_params.check_layout(u.delta)
        total += u.delta.data
    step = (eta / len(ordered)) * total
    return ParamVector((global_params.data + step).astype(global_params.data.dtype), global_params.layout)


@dataclass
class RoundLog:
    defense: str
    attack: str
    rows: list = field(default_factory=list)        # dicts: round, mta, ba
    timings: list = field(default_factory=list)     # seconds per round
    aggregated: list = field(default_factory=list)  # updates aggregated per round
    sampled: list = field(default_factory=list)     # sampled client ids per round
    final: Optional[MetricsRow] = None
    global_final: dict = field(default_factory=dict)
    client_final: list = field(default_factory=list)
    initial_params: Optional[ParamVector] = None
    global_params: Optional[ParamVector] = None
    reported_params: Optional[ParamVector] = None
    banks: dict = field(default_factory=dict)
    trigger: Optional[Trigger] = None
    adversaries: tuple = ()

    def rounds_csv(self) -> str:
        lines = ["round,defense,attack,mta,ba"]
        lines += [f"{r['round']},{self.defense},{self.attack},{r['mta']:.6f},{r['ba']:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "rounds.csv").write_text(self.rounds_csv())
        with open(directory / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "wall_time"])
            for r, t in zip(self.rows, self.timings):
                w.writerow([r["round"], f"{t:.3f}"])
        with open(directory / "clients.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "client", "mta", "ba", "bank_size"])
            g = self.global_final
            if g:
                w.writerow(["global", "", f"{g['mta']:.6f}", f"{g['ba']:.6f}", ""])
            for c in self.client_final:
                w.writerow(["patched", c["client"], f"{c['mta']:.6f}", f"{c['ba']:.6f}", c["bank_size"]])
        if self.final is not None:
            write_metrics([self.final], directory / "metrics.csv")
        for bank in self.banks.values():
            bank.export(directory / "banks")
        return directory


@dataclass
class Federation:
    """Everything a run needs that is fixed before round 1."""
    spec: ModelSpec
    train: LabeledDataset
    test: LabeledDataset
    clients: list
    adversaries: tuple
    trigger: Trigger
    attacker_triggers: dict
    defended: tuple


def load_data(cfg: ExperimentConfig):
    ti, tl, vi, vl = cfg.paths()
    return load_idx(ti, tl), load_idx(vi, vl)


def setup(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset,
          spec: Optional[ModelSpec] = None, adversary_ids=None) -> Federation:
    seed = cfg.experiment.seed
    K = cfg.data.num_clients
    train = subsample(train, cfg.data.fraction, int(derive_rng(seed, SUBSAMPLE).integers(2**31)))
    pseed = int(derive_rng(seed, PARTITION).integers(2**31))
    if cfg.data.partition == "iid":
        plan = partition_iid(train, K, pseed)
    else:
        plan = partition_dirichlet(train, K, cfg.data.alpha, pseed)
    plan.validate()
    clients = [plan.client_data(train, k) for k in range(K)]
    if adversary_ids is None:
        n_adv = int(math.floor(cfg.federation.adversary_fraction * K + 1e-9))
        adversary_ids = derive_rng(seed, ADVERSARIES).choice(K, size=n_adv, replace=False)
    adversaries = tuple(sorted(int(a) for a in adversary_ids))
    trigger = default_trigger(int(derive_rng(seed, TRIGGER).integers(2**31)), cfg.attack.target)
    if cfg.attack.kind == "dba" and len(adversaries) >= 2:
        parts = dba_split(trigger, len(adversaries))
        attacker_triggers = dict(zip(adversaries, parts))
    else:
        attacker_triggers = {a: trigger for a in adversaries}
    benign = [k for k in range(K) if k not in set(adversaries)]
    n_def = cfg.defense.defended_clients or len(benign)
    defended = tuple(benign[:n_def]) if cfg.defense.kind == "patch" else ()
    return Federation(spec or reference_cnn(), train, test, clients, adversaries, trigger, attacker_triggers,
                      defended)


def _eval_subset(test: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    if n <= 0 or n >= len(test):
        return test
    idx = np.sort(derive_rng(seed, EVAL).choice(len(test), size=n, replace=False))
    return test.subset(idx)


def _aggregate(cfg: ExperimentConfig, params: ParamVector, updates, state: DefenseState, n_adv_hint: int,
               rng) -> ParamVector:
    kind = cfg.defense.kind
    eta = cfg.federation.global_lr
    if kind in ("none", "patch"):
        return fedavg(params, updates, eta)
    if kind == "median_krum":
        if cfg.defense.krum_f >= 0:
            f = cfg.defense.krum_f
        else:
            # assume the sampled attackers, capped at the most Krum scoring tolerates
            f = min(n_adv_hint, max(0, (len(updates) - 3) // 2))
            if f < n_adv_hint:
                log.info("median_krum: %d sampled attackers exceed the Krum bound for n=%d; using f=%d",
                         n_adv_hint, len(updates), f)
        agg = median_krum(updates, f)
    elif kind == "foolsgold":
        agg, _ = foolsgold(updates, state, cfg.defense.foolsgold_kappa)
    elif kind == "flame":
        agg = flame(updates, state, cfg.defense.flame_noise, rng)
    elif kind == "norm_clip":
        bound = cfg.defense.norm_bound
        if bound <= 0:
            bound = float(np.median([u.delta.norm() for u in updates])) or 1.0
        agg = norm_clip(updates, bound)
    else:
        raise ConfigurationError(f"unknown defense {kind!r}")
    return params + agg * eta


def run_experiment(cfg: ExperimentConfig, train: Optional[LabeledDataset] = None,
                   test: Optional[LabeledDataset] = None, spec: Optional[ModelSpec] = None,
                   adversary_ids=None, progress: Optional[Callable[[int, dict], None]] = None) -> RoundLog:
    """Run one configured experiment end to end and return its log (nothing is written to disk)."""
    if train is None or test is None:
        train, test = load_data(cfg)
    fed = setup(cfg, train, test, spec, adversary_ids)
    seed = cfg.experiment.seed
    spec = fed.spec
    atk = AttackConfig(cfg.attack.kind, cfg.attack.target, cfg.attack_alpha, cfg.attack.stealth_lambda,
                       cfg.attack.k_ratio, cfg.attack.poison_fraction, fed.trigger)
    local_cfg = LocalTrainConfig(cfg.federation.local_epochs, cfg.federation.local_lr, cfg.federation.batch_size)
    syn = cfg.synthesis
    adv = set(fed.adversaries)
    eval_set = _eval_subset(fed.test, cfg.federation.round_eval_samples, seed)
    model_log = RoundLog(cfg.defense.kind, cfg.attack.kind, trigger=fed.trigger, adversaries=fed.adversaries)
    banks = {k: TriggerBank(k) for k in fed.defended}
    state = DefenseState(cfg.defense.kind)
    params = init_params(spec, int(derive_rng(seed, INIT).integers(2**31)))
    model_log.initial_params = params.copy()
    prev_delta = ParamVector.zeros(params.layout, params.data.dtype)
    target = cfg.attack.target
    K = cfg.data.num_clients

    for r in range(1, cfg.experiment.rounds + 1):
        t0 = time.perf_counter()
        always = fed.adversaries if cfg.federation.always_sample_adversaries else ()
        sampled = sample_clients(K, (cfg.federation.sample_min, cfg.federation.sample_max),
                                 derive_rng(seed, SAMPLE, r), always)
        updates = []
        for k in sampled.tolist():
            rng = derive_rng(seed, TRAIN, r, k)
            data = fed.clients[k]
            try:
                if k in adv and atk.kind != "none":
                    hook = neurotoxin_epoch_hook(prev_delta, atk.k_ratio) if atk.kind == "neurotoxin" else None
                    u = malicious_local_train(spec, params, data, atk, fed.attacker_triggers[k], local_cfg, rng,
                                              client_id=k, round_index=r, benign_proxy=prev_delta, after_epoch=hook)
                    if atk.kind == "neurotoxin":
                        u = neurotoxin_project(u, prev_delta, atk.k_ratio)
                    u = amplify(u, atk.alpha)
                else:
                    u = local_train(spec, params, data, local_cfg, rng, k, r)
                    if k in banks and (r - 1) % syn.every == 0:
                        synthesize_round(spec, params, data, syn, banks[k], r, derive_rng(seed, SYNTH, r, k))
            except FedPatchError as exc:
                raise type(exc)(f"round {r}, client {k}: {exc}") from exc
            updates.append(u)
        new_params = _aggregate(cfg, params, updates, state, len(adv & set(sampled.tolist())),
                                derive_rng(seed, NOISE, r))
        prev_delta = new_params - params
        params = new_params
        model = (spec, params)
        row = {"round": r, "mta": evaluate_mta(model, eval_set), "ba": evaluate_ba(model, eval_set, fed.trigger, target)}
        model_log.rows.append(row)
        model_log.timings.append(time.perf_counter() - t0)
        model_log.aggregated.append(len(updates))
        model_log.sampled.append(tuple(sampled.tolist()))
        log.info("round %d: sampled=%d mta=%.4f ba=%.4f (%.1fs)", r, len(sampled), row["mta"], row["ba"],
                 model_log.timings[-1])
        if progress is not None:
            progress(r, row)

    model_log.global_params = params
    final_mta = evaluate_mta((spec, params), fed.test)
    final_ba = evaluate_ba((spec, params), fed.test, fed.trigger, target)
    model_log.global_final = {"mta": final_mta, "ba": final_ba}
    reported = params
    for k in fed.defended:
        patchset = build_patch_dataset(banks[k], fed.clients[k])
        try:
            patched = patch_model(spec, params, fed.clients[k], patchset, syn.patch_epochs, syn.patch_lr,
                                  syn.patch_batch_size, derive_rng(seed, PATCH, 0, k))
        except FedPatchError as exc:
            raise type(exc)(f"patching client {k}: {exc}") from exc
        m = (spec, patched)
        model_log.client_final.append({"client": k, "mta": evaluate_mta(m, fed.test),
                                       "ba": evaluate_ba(m, fed.test, fed.trigger, target),
                                       "bank_size": len(banks[k])})
        if k == fed.defended[0]:
            reported = patched
            final_mta, final_ba = model_log.client_final[-1]["mta"], model_log.client_final[-1]["ba"]
    model_log.reported_params = reported
    model_log.banks = banks
    model_log.final = MetricsRow(cfg.scenario_id, cfg.defense.kind, cfg.attack.kind, final_mta, final_ba,
                                 cfg.experiment.rounds, seed, float(sum(model_log.timings)))
    return model_log
