"""Tests for the loss, the Adadelta update and the epoch loop."""
import math

import numpy as np
import pytest

from app.exceptions import HarnessError, ParameterError
from app.models.malaria_models import TrainConfig
from app.services.layers import Dense, Softmax2
from app.services.networks import ModelGraph
from app.services.tensor_core import RngStream
from app.services.training import (
    LOG_COLUMNS,
    AdadeltaState,
    ArrayDataset,
    adadelta_step,
    bce_loss,
    bce_with_softmax,
    evaluate,
    fit,
    train_epoch,
)


def _dense_net(seed=0):
    """Two-feature dense classifier used for quick convergence checks."""
    rng = np.random.default_rng(seed)
    hidden = Dense(2, 8, activation="relu", name="dense_1")
    out = Dense(8, 2, name="dense_2")
    hidden.params["W"][...] = rng.normal(scale=0.5, size=(2, 8))
    out.params["W"][...] = rng.normal(scale=0.5, size=(8, 2))
    return ModelGraph("toy", [hidden, out, Softmax2(name="softmax_3")], (2,))


def _separable(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 2)).astype(np.float32)
    y = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    # keep a margin around the boundary
    keep = np.abs(x[:, 0] + x[:, 1]) > 0.1
    return x[keep], y[keep]


def _dataset(x, y, prefix):
    return ArrayDataset(x, y, np.array([f"{prefix}{i}" for i in range(len(y))]))


def test_bce_loss_values_and_clamping():
    assert bce_loss(np.array([0.5]), np.array([1])) == pytest.approx(math.log(2.0))
    assert bce_loss(np.array([1.0]), np.array([0])) == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert math.isfinite(bce_loss(np.array([0.0, 1.0]), np.array([1, 0])))


def test_bce_with_softmax_gradient():
    probs = np.array([[0.2, 0.8], [0.6, 0.4]])
    y = np.array([1, 1])
    _, grad = bce_with_softmax(probs, y)
    assert np.allclose(grad, (probs - np.array([[0.0, 1.0], [0.0, 1.0]])) / 2)


def test_adadelta_first_step_matches_the_update_rule():
    params = {"w": np.array([1.0])}
    state = AdadeltaState.for_params(params, rho=0.95, eps=1e-6, lr=1.0)
    adadelta_step(params, {"w": np.array([2.0])}, state)
    eg2 = 0.05 * 4.0
    delta = -math.sqrt(1e-6) / math.sqrt(eg2 + 1e-6) * 2.0
    assert params["w"][0] == pytest.approx(1.0 + delta, rel=1e-12)
    assert state.eg2["w"][0] == pytest.approx(eg2)
    assert state.edx2["w"][0] == pytest.approx(0.05 * delta * delta)


def test_adadelta_unit_gradient_from_zero_state():
    params = {"w": np.array([0.0])}
    state = AdadeltaState.for_params(params, rho=0.95, eps=1e-6, lr=1.0)
    adadelta_step(params, {"w": np.array([1.0])}, state)
    assert params["w"][0] == pytest.approx(-0.004472, abs=1e-6)
    assert state.eg2["w"][0] == pytest.approx(0.05)


def test_adadelta_steps_are_insensitive_to_gradient_scale():
    small = {"w": np.array([0.0])}
    large = {"w": np.array([0.0])}
    small_state = AdadeltaState.for_params(small)
    large_state = AdadeltaState.for_params(large)
    for _ in range(50):
        adadelta_step(small, {"w": np.array([1.0])}, small_state)
        adadelta_step(large, {"w": np.array([1000.0])}, large_state)
    before_small, before_large = small["w"][0], large["w"][0]
    adadelta_step(small, {"w": np.array([1.0])}, small_state)
    adadelta_step(large, {"w": np.array([1000.0])}, large_state)
    delta_small = small["w"][0] - before_small
    delta_large = large["w"][0] - before_large
    assert abs(delta_large - delta_small) < 0.01 * abs(delta_small)


def test_adadelta_zero_gradient_is_a_fixed_point():
    params = {"w": np.array([0.5, -2.0, 3.0])}
    state = AdadeltaState.for_params(params)
    adadelta_step(params, {"w": np.zeros(3)}, state)
    assert params["w"].tolist() == [0.5, -2.0, 3.0]
    assert not state.eg2["w"].any()
    assert not state.edx2["w"].any()


def test_adadelta_skips_frozen_parameters():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = AdadeltaState.for_params(params)
    adadelta_step(params, {"a": np.array([1.0]), "b": np.array([1.0])}, state, {"a": False, "b": True})
    assert params["a"][0] == 1.0
    assert params["b"][0] != 1.0
    assert state.eg2["a"][0] == 0.0


def test_adadelta_rejects_missing_or_misshapen_gradients():
    params = {"w": np.zeros(3)}
    state = AdadeltaState.for_params(params)
    with pytest.raises(ParameterError):
        adadelta_step(params, {}, state)
    with pytest.raises(ParameterError):
        adadelta_step(params, {"w": np.zeros(2)}, state)


def test_train_epoch_needs_data():
    empty = ArrayDataset(np.zeros((0, 2), dtype=np.float32), np.zeros(0, dtype=np.int64))
    with pytest.raises(HarnessError):
        train_epoch(_dense_net(), empty, TrainConfig(epochs=1, batch_size=4), RngStream(0))


def test_train_epoch_reports_sample_weighted_loss():
    x, y = _separable(50, 0)
    stats = train_epoch(_dense_net(), _dataset(x, y, "t"), TrainConfig(epochs=1, batch_size=7), RngStream(0), dropout=False)
    assert set(stats) == {"train_loss", "train_acc"}
    assert 0.0 <= stats["train_acc"] <= 1.0
    assert stats["train_loss"] > 0.0


def test_fit_reaches_high_accuracy_on_separable_data():
    x, y = _separable(1000, 1)
    vx, vy = _separable(200, 2)
    model = _dense_net()
    config = TrainConfig(epochs=20, batch_size=16, lr=1.0, shuffle_seed=0)
    best, log = fit(model, _dataset(x, y, "t"), _dataset(vx, vy, "v"), config, dropout=False)
    assert list(log.columns) == LOG_COLUMNS
    assert len(log) == 20
    assert log["val_acc"].max() >= 0.99
    assert log["train_loss"].iloc[-1] < log["train_loss"].iloc[0]


def test_fit_keeps_the_earliest_best_validation_epoch():
    x, y = _separable(200, 3)
    vx, vy = _separable(60, 4)
    best, log = fit(_dense_net(), _dataset(x, y, "t"), _dataset(vx, vy, "v"), TrainConfig(epochs=6, batch_size=16), dropout=False)
    peak = log["val_acc"].max()
    assert best.metadata["val_acc"] == pytest.approx(peak)
    assert best.metadata["epoch"] == int(log.loc[log["val_acc"] == peak, "epoch"].iloc[0])


def test_fit_returns_the_weights_of_the_best_epoch():
    x, y = _separable(120, 5)
    vx, vy = _separable(60, 6)
    val = _dataset(vx, vy, "v")
    model = _dense_net()
    best, _ = fit(model, _dataset(x, y, "t"), val, TrainConfig(epochs=4, batch_size=16), dropout=False)
    _, accuracy, _ = evaluate(best.to_model(), val)
    assert accuracy == pytest.approx(best.metadata["val_acc"])


def test_fit_rejects_overlapping_train_and_validation():
    x, y = _separable(40, 7)
    data = _dataset(x, y, "s")
    with pytest.raises(HarnessError):
        fit(_dense_net(), data, data, TrainConfig(epochs=1, batch_size=8))


def test_fit_is_deterministic():
    x, y = _separable(100, 8)
    vx, vy = _separable(40, 9)
    runs = [
        fit(_dense_net(), _dataset(x, y, "t"), _dataset(vx, vy, "v"), TrainConfig(epochs=3, batch_size=16))
        for _ in range(2)
    ]
    assert runs[0][1].equals(runs[1][1])
    for name, value in runs[0][0].params.items():
        assert np.array_equal(value, runs[1][0].params[name])


def test_evaluate_records_match_accuracy():
    x, y = _separable(60, 10)
    loss, accuracy, records = evaluate(_dense_net(), _dataset(x, y, "e"))
    assert len(records) == len(y)
    assert accuracy == pytest.approx(np.mean([r.predicted == r.y for r in records]))
    assert loss > 0.0
