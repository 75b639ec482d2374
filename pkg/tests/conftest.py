from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("geodrop", max_examples=40, deadline=None)
settings.load_profile("geodrop")

REPO = Path(__file__).resolve().parents[1]
MNIST_DIR = REPO / "data" / "mnist"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {
        "train_images": MNIST_DIR / "train-images-idx3-ubyte.gz",
        "train_labels": MNIST_DIR / "train-labels-idx1-ubyte.gz",
        "test_images": MNIST_DIR / "t10k-images-idx3-ubyte.gz",
        "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
    }
    missing = [p for p in paths.values() if not p.is_file()]
    if missing:
        pytest.skip(f"MNIST files missing: {missing}")
    return paths
