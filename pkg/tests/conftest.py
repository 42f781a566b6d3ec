import numpy as np
import pytest
import torch

from vflab.datasets import ingest_dataset, make_synthetic
from vflab.nets import Fcnn


@pytest.fixture(scope="session")
def synth():
    """Small deterministic blob dataset used across the suite."""
    return make_synthetic(n=600, d=20, classes=4, seed=7)


@pytest.fixture(scope="session")
def digits():
    """Real handwritten-digit data bundled with sklearn (no network needed)."""
    return ingest_dataset("digits")


@pytest.fixture()
def tiny_backbone():
    torch.manual_seed(3)
    return Fcnn(10, 8, hidden=16, n_layers=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_addoption(parser):
    parser.addoption("--run-acceptance", action="store_true", default=False,
                     help="run the full acceptance criteria suite")


def mnist_or_fail(cache_dir=None):
    """Acceptance helper: ingest MNIST, failing with a clear diagnostic when the
    environment has neither cached files nor network access."""
    from vflab.validation import DatasetError

    try:
        return ingest_dataset("mnist", cache_dir=cache_dir, download=True)
    except DatasetError as exc:
        pytest.fail(
            f"MNIST is required for this criterion but could not be ingested: {exc}. "
            "Place the MNIST archives under the cache directory (VFLAB_DATA_DIR or "
            "~/.cache/vflab/MNIST/raw) or enable network access.",
            pytrace=False,
        )
