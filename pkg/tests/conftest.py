import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from echoplan.components import ModelConfig, build_model  # noqa: E402
from echoplan.raster import GridSpec  # noqa: E402

torch.set_num_threads(1)

SMALL = ModelConfig(H=8, W=8, K=8, n_tokens=4, heads=2, encoder_hidden=3, learner_hidden=5, mln_hidden=6, head_hidden=7)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return build_model(SMALL, seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def grid():
    return GridSpec()
