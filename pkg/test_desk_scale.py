"""
Desk-scale learning runs on synthetic cells: convergence of the scaled
custom net, transfer from task A to task B, and the SVM head.

Run with `pytest -m slow`; each test trains for several minutes on CPU.
"""
import numpy as np
import pytest

from app.models.malaria_models import ExperimentConfig, TrainConfig
from app.services.harness import ExperimentData, run_experiment
from app.services.synthetic import make_synthetic_blobs

from conftest import DESK_DIVISOR, DESK_SIZE

pytestmark = pytest.mark.slow

TRAIN = np.arange(0, 500)
VAL = np.arange(500, 600)
TEST = np.arange(600, 700)
HEAD_ONLY = "L1-L15"


def _task(task, seed):
    images, labels = make_synthetic_blobs(700, size=DESK_SIZE, seed=seed, task=task)
    return ExperimentData.from_arrays(images, labels)


def _config(epochs=30, **updates):
    config = ExperimentConfig(
        model="custom",
        input_size=DESK_SIZE,
        width_divisor=DESK_DIVISOR,
        train=TrainConfig(epochs=epochs, batch_size=16, lr=1.0, shuffle_seed=0),
    )
    return config.model_copy(update=updates)


@pytest.fixture(scope="module")
def task_a_run(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("task_a")
    result = run_experiment(_task("A", 0), TRAIN, VAL, TEST, _config(), out_dir)
    return result, out_dir / "model.ckpt"


def test_custom_net_learns_the_synthetic_task(task_a_run):
    result, _ = task_a_run
    assert result.reports["test"].accuracy >= 0.98
    assert len(result.log) == 30
    assert result.log["train_loss"].iloc[-1] < result.log["train_loss"].iloc[0]


def test_head_only_transfer_beats_a_frozen_random_backbone(task_a_run):
    _, checkpoint = task_a_run
    task_b = _task("B", 1)
    transferred = run_experiment(
        task_b, TRAIN, VAL, TEST, _config(epochs=15, pretrained=str(checkpoint), freeze=HEAD_ONLY)
    )
    control = run_experiment(task_b, TRAIN, VAL, TEST, _config(epochs=15, freeze=HEAD_ONLY, seed=7))
    assert transferred.reports["test"].accuracy >= 0.90
    assert transferred.reports["test"].accuracy > control.reports["test"].accuracy
    trainable = transferred.model.trainable
    assert trainable["dense_16.W"] and trainable["dense_18.W"]
    assert not trainable["conv2d_1.W"] and not trainable["dense_14.W"]


def test_svm_head_tracks_the_softmax_head(task_a_run):
    softmax, _ = task_a_run
    svm = run_experiment(_task("A", 0), TRAIN, VAL, TEST, _config(head="svm"))
    assert abs(svm.reports["test"].accuracy - softmax.reports["test"].accuracy) <= 0.02
