import os
from pathlib import Path

import numpy as np
import pytest

from protofed.data import Dataset

FIXTURES = Path(__file__).parent / "fixtures"
MNIST_CANDIDATES = [
    os.environ.get("PROTOFED_MNIST_DIR"),
    str(Path(__file__).parents[1] / "data" / "mnist"),
    "/root/data/mnist",
]


def find_mnist() -> Path | None:
    for cand in MNIST_CANDIDATES:
        if cand and (Path(cand) / "train-labels-idx1-ubyte").exists():
            return Path(cand)
        if cand and (Path(cand) / "train-labels-idx1-ubyte.gz").exists():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    d = find_mnist()
    if d is None:
        pytest.skip("MNIST IDX files not found; set PROTOFED_MNIST_DIR")
    return d


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    from protofed.data import load_idx

    sfx = "" if (mnist_dir / "train-images-idx3-ubyte").exists() else ".gz"
    return load_idx(mnist_dir / f"train-images-idx3-ubyte{sfx}", mnist_dir / f"train-labels-idx1-ubyte{sfx}")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    from protofed.data import load_idx

    sfx = "" if (mnist_dir / "t10k-images-idx3-ubyte").exists() else ".gz"
    return load_idx(mnist_dir / f"t10k-images-idx3-ubyte{sfx}", mnist_dir / f"t10k-labels-idx1-ubyte{sfx}")


def toy_dataset(n: int, seed: int = 0, n_classes: int = 10) -> Dataset:
    """Separable synthetic images: class j lights up a 4x4 block at a class-specific spot."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    images = rng.random((n, 1, 28, 28), dtype=np.float32) * 0.2
    for i, j in enumerate(labels):
        r, c = 4 + 6 * (j // 4), 2 + 6 * (j % 4)
        images[i, 0, r:r + 4, c:c + 4] += 0.8
    return Dataset(images, labels.astype(np.int64), n_classes)


@pytest.fixture
def toy_idx_dir():
    return FIXTURES / "toy"


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
