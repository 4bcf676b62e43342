import numpy as np
import pytest

from tdmr_lab.harness import TrainingProfile, train_detectors


@pytest.fixture(scope="session")
def tiny_detectors():
    """Detectors trained on the small profile; good enough for contract tests."""
    return train_detectors(profile=TrainingProfile.tiny(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
