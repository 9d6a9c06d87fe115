import numpy as np
import pytest

from tornet.network import ModelConfig

# A scaled-down TorNet: same topology and frequency arithmetic as the
# default (40 Mel bins, two (2,1) strides in stage 2, five SSN sub-bands),
# narrow channels and 16 frames so forward/backward take milliseconds.
TINY = ModelConfig(
    n_frames=16,
    stem_channels=4,
    stage2=((4, 6, (2, 1)), (6, 8, (2, 1))),
    stage3=((8, 8, (1, 1)), (8, 10, (1, 1))),
    head_hidden=8,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
