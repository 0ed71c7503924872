"""Main-task and backdoor accuracy plus the per-run summary row."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .data import LabeledDataset, Trigger, poison_test_set
from .errors import InputError
from .nn import predict

# A model is either (spec, params) or any callable images -> predicted labels.
Model = Union[tuple, Callable[[np.ndarray], np.ndarray]]


def _predictor(model: Model):
    if callable(model):
        return model
    spec, params = model
    return lambda images: predict(spec, params, images)


def evaluate_mta(model: Model, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise InputError("cannot evaluate on an empty test set")
    pred = np.asarray(_predictor(model)(test.images))
    return float(np.mean(pred == test.labels))


def evaluate_ba(model: Model, test: LabeledDataset, trigger: Trigger, target: int) -> float:
    poisoned = poison_test_set(test, trigger, target)
    pred = np.asarray(_predictor(model)(poisoned.images))
    return float(np.mean(pred == target))


@dataclass
class MetricsRow:
    scenario: str
    defense: str
    attack: str
    mta: float
    ba: float
    rounds: int
    seed: int
    wall_time: float

    def __post_init__(self):
        for name in ("mta", "ba"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {v}")


# wall_time is kept out of the CSV so repeated runs give byte-identical files
CSV_FIELDS = [f.name for f in fields(MetricsRow) if f.name != "wall_time"]


def write_metrics(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            d = asdict(r)
            d["mta"], d["ba"] = f"{r.mta:.6f}", f"{r.ba:.6f}"
            writer.writerow(d)
    return path


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return [
            MetricsRow(r["scenario"], r["defense"], r["attack"], float(r["mta"]), float(r["ba"]),
                       int(r["rounds"]), int(r["seed"]), float(r.get("wall_time") or 0.0))
            for r in csv.DictReader(fh)
        ]
