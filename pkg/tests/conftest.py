import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tiny_arch(**overrides):
    """Small two-level architecture used by gradient checks."""
    from seqflow.net import ArchConfig
    defaults = dict(
        level_divisors=(1, 4), feature_dims=(4, 6), hidden_width=4,
        neighbors=3, cost_hidden=(4,), weight_hidden=(3,),
        refine_width=5, refine_hidden=(4,), head_hidden=(4,), interp_k=2)
    defaults.update(overrides)
    return ArchConfig(**defaults)
