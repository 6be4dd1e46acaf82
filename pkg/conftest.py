"""
Shared pytest fixtures: synthetic cell images, tiny networks and
desk-scale experiment settings.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add app directory to path
sys.path.insert(0, str(Path(__file__).parent))

from app.models.malaria_models import ExperimentConfig, TrainConfig  # noqa: E402
from app.services.harness import ExperimentData  # noqa: E402
from app.services.networks import build_model, build_vgg_baseline  # noqa: E402
from app.services.synthetic import make_synthetic_blobs  # noqa: E402

DESK_SIZE = 32
DESK_DIVISOR = 8


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (deselect with -m 'not slow')")


@pytest.fixture(scope="session")
def blobs():
    """120 task-A images at 32x32 with balanced labels."""
    return make_synthetic_blobs(120, size=DESK_SIZE, seed=0, task="A")


@pytest.fixture
def blob_data(blobs):
    images, labels = blobs
    patients = [f"P{i % 12:02d}" for i in range(len(labels))]
    return ExperimentData.from_arrays(images, labels, patients)


@pytest.fixture
def tiny_custom():
    return build_model("custom", DESK_SIZE, seed=0, width_divisor=DESK_DIVISOR)


@pytest.fixture
def tiny_vgg():
    return build_vgg_baseline(DESK_SIZE, width_divisor=16, head_width=16, seed=0)


@pytest.fixture
def desk_config():
    """Scaled custom net with a short Adadelta regime."""
    return ExperimentConfig(
        model="custom",
        input_size=DESK_SIZE,
        width_divisor=DESK_DIVISOR,
        train=TrainConfig(epochs=2, batch_size=16, lr=1.0, shuffle_seed=0),
    )


@pytest.fixture
def random_batch():
    rng = np.random.default_rng(0)
    return rng.uniform(0.0, 1.0, size=(4, 3, DESK_SIZE, DESK_SIZE)).astype(np.float32)
