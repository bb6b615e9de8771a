import os

import numpy as np
import pytest

from dollo.trees import Tree

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def two_leaf_tree():
    return Tree.from_links({1: 3, 2: 3}, {1: 0.0, 2: 0.0, 3: 1.0},
                           {1: "a", 2: "b"})


def data_path(name: str) -> str:
    return os.path.join(DATA_DIR, name)
