"""Run configured experiments and collect their summary rows."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ConfigValidationError, ExperimentConfig, validate_config
from .errors import FedPatchError
from .fl import RoundLog, load_data, run_experiment
from .metrics import read_metrics, write_metrics
from .report import render_report

log = logging.getLogger(__name__)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, experiment=replace(cfg.experiment, seed=int(seed)))


def run_config(cfg: ExperimentConfig, out_dir=None, data_cache=None) -> RoundLog:
    """Run one experiment; when ``out_dir`` is given, write its logs under ``out_dir/<scenario>``."""
    key = cfg.paths()
    if data_cache is not None and key in data_cache:
        train, test = data_cache[key]
    else:
        train, test = load_data(cfg)
        if data_cache is not None:
            data_cache[key] = (train, test)
    result = run_experiment(cfg, train, test)
    if out_dir is not None:
        run_dir = Path(out_dir) / cfg.scenario_id
        result.write(run_dir)
        (run_dir / "config.ini").write_text(cfg.to_ini())
    return result


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (scenario or path, message)
    wall_times: dict = field(default_factory=dict)


def load_configs(paths, preset=None, overrides=None) -> list:
    """Validate every config first; raises ConfigValidationError naming each bad file."""
    configs, errors = [], []
    for p in paths:
        try:
            configs.append(validate_config(p, preset=preset, overrides=overrides))
        except ConfigValidationError as exc:
            errors += [f"{p}: {e}" for e in exc.errors]
    if errors:
        raise ConfigValidationError(errors)
    return configs


def run_suite(configs, out_dir, seeds=None) -> SuiteResult:
    """Run each config (once per seed when ``seeds`` is given); failures are recorded and skipped."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = SuiteResult()
    cache = {}
    jobs = [with_seed(c, s) for c in configs for s in seeds] if seeds else list(configs)
    for cfg in jobs:
        t0 = time.perf_counter()
        try:
            rl = run_config(cfg, out_dir, cache)
        except (FedPatchError, OSError) as exc:
            log.error("%s failed: %s", cfg.scenario_id, exc)
            result.failures.append((cfg.scenario_id, str(exc)))
            continue
        result.rows.append(rl.final)
        result.wall_times[cfg.scenario_id] = time.perf_counter() - t0
    write_suite_outputs(result, out_dir)
    return result


def write_suite_outputs(result: SuiteResult, out_dir) -> None:
    out_dir = Path(out_dir)
    metrics = write_metrics(result.rows, out_dir / "metrics.csv")
    # render from the CSV as written so `fedpatch report` reproduces it exactly
    (out_dir / "report.md").write_text(render_report(read_metrics(metrics)))
    with open(out_dir / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "error"])
        w.writerows(result.failures)
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "wall_time"])
        for k, v in result.wall_times.items():
            w.writerow([k, f"{v:.3f}"])
