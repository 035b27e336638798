import numpy as np
import pytest

from picl.geometry import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_cloud(rng, n=64, labeled=False, parts=3):
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    labels = rng.integers(0, parts, size=n) if labeled else None
    return PointCloud(pts, labels)
