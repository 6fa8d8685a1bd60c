import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ribgraph.synthetic import RibcageParams, generate_ribcage, us_like


@pytest.fixture(scope="session")
def default_cage():
    """One shared default rib cage (cloud, truth)."""
    return generate_ribcage(RibcageParams(rng_seed=1))


@pytest.fixture(scope="session")
def default_us_cage(default_cage):
    cloud, truth = default_cage
    return us_like(cloud, truth, rng_seed=2)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
