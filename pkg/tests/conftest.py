import numpy as np
import pytest

from rrtrack import autodiff as ad
from rrtrack.network import NetworkConfig


@pytest.fixture(autouse=True)
def _double_precision():
    """Tests run in float64 unless they opt out; restore state afterwards."""
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def tiny_config():
    """A small but topology-complete network config for fast tests."""
    return NetworkConfig(crop_size=16, conv_blocks=((3, 4), (3, 8), (3, 16)),
                         skip_channels=(2, 4, 8), embed_dim=24, lstm_units=8)
