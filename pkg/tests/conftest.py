import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bimp.graph import build_graph  # noqa: E402


def random_graph(rng, n=None, p=None, dim=3, n_range=(2, 10), allow_isolated=True):
    n = int(rng.integers(n_range[0], n_range[1] + 1)) if n is None else n
    p = rng.uniform(0.2, 0.7) if p is None else p
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    if not allow_isolated:
        # chain any isolated node to its successor
        deg = np.bincount(edges.reshape(-1), minlength=n)
        extra = [(v, (v + 1) % n) for v in range(n) if deg[v] == 0]
        have = {tuple(sorted(e)) for e in edges.tolist()}
        extra = [e for e in {tuple(sorted(e)) for e in extra} if e not in have]
        if extra:
            edges = np.concatenate([edges, np.array(extra, dtype=np.int64)])
    return build_graph(n, edges, node_features=rng.standard_normal((n, dim)),
                       node_labels=rng.integers(0, 2, n))


def edge_keyed(batch, values):
    """Map directed (u, v) of a single-graph batch to per-edge values."""
    return {(int(u), int(v)): values[i] for i, (u, v) in enumerate(zip(batch.src_index, batch.dst_index))}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
