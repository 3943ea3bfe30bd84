"""Shared fixtures: locating optional MNIST data for the desk-scale suite."""

import os
from pathlib import Path

import pytest

from movecl.data import locate_mnist

_CANDIDATE_DIRS = [
    os.environ.get("MOVECL_DATA_DIR"),
    "data/mnist",
    "data",
    str(Path(__file__).resolve().parent.parent / "data" / "mnist"),
]


def find_mnist_dir():
    for candidate in _CANDIDATE_DIRS:
        if candidate and locate_mnist(candidate) is not None:
            return Path(candidate)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    found = find_mnist_dir()
    if found is None:
        pytest.skip(
            "MNIST IDX files not found (set MOVECL_DATA_DIR or place the four "
            "files under ./data/mnist; scripts/fetch_mnist.py downloads them)")
    return found
