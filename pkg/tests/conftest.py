from pathlib import Path

import numpy as np
import pytest

from clusterate.population import Population

DATA = Path(__file__).parent / "data"


def random_population(rng, h=2, m_range=(4, 8), v=2, schedule=True, units=(1, 4), treat_frac=0.5, log_weights=True):
    """Random blocked population; observed mode gets a random valid assignment."""
    blocks, clusters, weights, T = [], [], [], []
    for b in range(h):
        m_b = int(rng.integers(m_range[0], m_range[1] + 1))
        m1 = min(max(1, int(round(treat_frac * m_b))), m_b - 1)
        arm = rng.permutation(np.r_[np.ones(m1), np.zeros(m_b - m1)])
        for j in range(m_b):
            for _ in range(int(rng.integers(units[0], units[1] + 1))):
                blocks.append(f"b{b}")
                clusters.append(f"c{j}")
                weights.append(float(np.exp(rng.uniform(-1.5, 1.5))) if log_weights else 1.0)
                T.append(int(arm[j]))
    n = len(blocks)
    X = rng.normal(size=(n, v)) if v else None
    if schedule:
        y0 = rng.normal(size=n) + (X.sum(axis=1) if v else 0)
        y1 = y0 + 1 + rng.normal(size=n)
        return Population.from_arrays(blocks, clusters, weights, X, y0=y0, y1=y1)
    y = rng.normal(size=n) + (X @ np.arange(1, v + 1) if v else 0) + np.array(T)
    return Population.from_arrays(blocks, clusters, weights, X, y=y, treatment=T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def four_cluster_schedule():
    """One block, one unit per cluster, weights {1,1,2,4}."""
    return Population.from_arrays(
        None, ["c1", "c2", "c3", "c4"], [1.0, 1.0, 2.0, 4.0], y0=[1.0, 2.0, 3.0, 5.0], y1=[2.0, 4.0, 5.0, 9.0]
    )
