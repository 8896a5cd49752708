import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from nqs.basis import all_configurations

# Results must be bitwise reproducible, so BLAS is pinned to one worker.
_LIMITS = threadpool_limits(limits=1)


def dense_from_log(logs):
    """Amplitudes exp(log psi) without any shift or normalization."""
    return np.exp(np.asarray(logs))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(n, seed):
    r = np.random.default_rng(seed)
    v = r.normal(size=1 << n) + 1j * r.normal(size=1 << n)
    return v / np.linalg.norm(v)


def configs(n):
    return all_configurations(n)
