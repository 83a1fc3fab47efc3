import os

import numpy as np
import pytest

try:
    # Single-threaded BLAS: deterministic reduction order and stable step
    # timings, matching the CLI's default deterministic mode.
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=int(os.environ.get("REVVOLNET_THREADS", "1")))
except ImportError:  # pragma: no cover
    pass


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def randn5(rng, shape, scale=0.1):
    return (np.asarray(rng.standard_normal(shape)) * scale).astype(np.float32)
