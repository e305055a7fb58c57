import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fairmp.graph import AttributedGraph

# real benchmark datasets are optional: tests that reproduce published
# numbers skip with a message when the files are not present
DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def dataset_dir(name: str) -> Path:
    import os

    override = os.environ.get("FAIRMP_DATA_DIR")
    base = Path(override) if override else DATA_DIR
    return base / name


def require_dataset(name: str) -> Path:
    path = dataset_dir(name)
    if not (path / "nodes.csv").exists():
        pytest.skip(f"benchmark dataset {name!r} not available under {path} "
                    "(place nodes.csv/edges.csv there to enable this check)")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(rng, n=10, d=4, edge_prob=0.4, ensure_groups=True):
    """Small random graph used across the suite."""
    x = rng.normal(size=(n, d))
    s = rng.integers(0, 2, size=n)
    if ensure_groups:
        s[0], s[1] = 0, 1
    y = rng.integers(0, 2, size=n)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.uniform(size=iu.size) < edge_prob
    pairs = np.stack([iu[keep], ju[keep]], axis=1)
    if pairs.shape[0] == 0:
        pairs = np.array([[0, 1]])
    return AttributedGraph.from_edge_list(x, y, s, pairs)


@pytest.fixture
def small_graph(rng):
    return random_graph(rng, n=10, d=4)
