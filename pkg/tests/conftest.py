import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from fedpatch.data import LabeledDataset, data_root, dataset_paths

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def mnist_available() -> bool:
    try:
        return all(p.exists() for p in dataset_paths("mnist", "train") + dataset_paths("mnist", "test"))
    except Exception:
        return False


needs_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found under {data_root()}")


def blob_dataset(n_per_class=20, classes=10, seed=0, noise=0.08) -> LabeledDataset:
    """Each class is a bright 4x4 block at its own spot plus noise: trivially learnable."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(classes):
        base = np.zeros((28, 28), np.float32)
        r, col = 2 + 6 * (c // 4), 2 + 6 * (c % 4)
        base[r:r + 4, col:col + 4] = 0.9
        x = np.clip(base + rng.normal(0, noise, size=(n_per_class, 28, 28)), 0, 1).astype(np.float32)
        images.append(x)
        labels.append(np.full(n_per_class, c))
    return LabeledDataset(np.concatenate(images), np.concatenate(labels).astype(np.int64))


@pytest.fixture(scope="session")
def mnist():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found under {data_root()}")
    from fedpatch.data import load_dataset
    return load_dataset("mnist", "train"), load_dataset("mnist", "test")


@pytest.fixture
def blobs():
    return blob_dataset()


# criterion number -> list of (status, detail); filled by test_acceptance, printed at the end
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        parts = ACCEPTANCE_RESULTS[n]
        statuses = {s for s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "BLOCKED")
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n}: {overall} - {detail}")
