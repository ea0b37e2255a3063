import numpy as np
import pytest

from quality_fusion.config import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough that a full train+evaluate cell runs in well under a second."""
    return ExperimentConfig(
        num_classes=4,
        n_train=32,
        n_test=24,
        N=4,
        C=4,
        K=3,
        I=2,
        epochs=3,
        lr=0.05,
        batch_size=16,
        log_every=1,
    )
