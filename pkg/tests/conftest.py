import numpy as np
import pytest

from shapedmlp.features import ShapeParams, build_hat_dataset
from shapedmlp.network import RawDataset


def make_raw(n0, p, seed, scale=(0.45, 0.75), with_test=True, test_scale=0.6):
    """Well-conditioned toy data with norm ratios inside the shaped regime."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n0, p))
    x *= rng.uniform(*scale, size=p) * np.sqrt(n0) / np.linalg.norm(x, axis=0)
    y = rng.standard_normal(p)
    x_test = None
    if with_test:
        x_test = rng.standard_normal(n0)
        x_test *= test_scale * np.sqrt(n0) / np.linalg.norm(x_test)
    return RawDataset(x, y, x_test)


def make_hat(n0, p, seed, psi=0.0, eta=0.0, **kw):
    return build_hat_dataset(make_raw(n0, p, seed, **kw), ShapeParams(psi, eta))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
