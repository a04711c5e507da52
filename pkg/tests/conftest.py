import os

import numpy as np
import pytest

from dcgp._sample_data import write_mnist_sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Real MNIST digits (bundled mlxtend sample) written as IDX files."""
    env = os.environ.get("DCGP_TEST_MNIST")
    if env:
        return env
    out = write_mnist_sample(str(tmp_path_factory.mktemp("mnist")))
    if out is None:
        pytest.skip("mlxtend sample data not installed")
    return out


def random_spd(rng, n, ridge=1.0):
    B = rng.standard_normal((n, n))
    return B @ B.T + ridge * np.eye(n)
