import pytest

from actspill.activations import ActivationProfile
from actspill.config import HardwareConfig
from actspill.perf import canonical_validation_config


@pytest.fixture
def bert_12k():
    """Canonical H12288 L3 encoder config at batch 16, TP 2."""
    return canonical_validation_config(12288, 3)


@pytest.fixture
def default_profile():
    return ActivationProfile()


@pytest.fixture
def default_hw():
    return HardwareConfig()
