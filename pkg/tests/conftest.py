import os
from pathlib import Path

import pytest

from efficientgrad import tensor


def _mnist_dir() -> Path | None:
    for cand in (os.environ.get("EFFICIENTGRAD_MNIST_DIR"), "/root/data/mnist", "data/mnist"):
        if cand and (Path(cand) / "train-images-idx3-ubyte").exists():
            return Path(cand)
        if cand and (Path(cand) / "train-images.idx3-ubyte").exists():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    d = _mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found; set EFFICIENTGRAD_MNIST_DIR")
    return d


@pytest.fixture(autouse=True)
def _single_thread():
    yield
    tensor.set_num_threads(1)
