"""Tests for network construction, freezing and topology round trips."""
import numpy as np
import pytest

from app.exceptions import ParameterError, ShapeError
from app.services.layers import Conv2D, Dense, MaxPool2D
from app.services.networks import (
    ModelGraph,
    build_custom_net,
    build_model,
    build_vgg_baseline,
    parse_freeze,
    set_trainable,
)
from app.services.tensor_core import RngStream
from app.services.training import AdadeltaState, train_step


def _kinds(model):
    return [layer.kind for layer in model.layers]


def test_custom_net_shape_anchors():
    model = build_custom_net(200, initialize=False)
    assert len(model.layers) == 19
    shapes = model.output_shapes(1)
    assert _kinds(model)[12] == "flatten"
    assert shapes[12] == (1, 36864)
    assert shapes[-1] == (1, 2)
    assert _kinds(model)[13:] == ["dense", "dropout", "dense", "dropout", "dense", "softmax"]
    assert len(model.stages) == 19


def test_vgg_baseline_shape_anchors():
    model = build_vgg_baseline(200, initialize=False)
    kinds = _kinds(model)
    assert kinds.count("conv2d") == 13
    assert kinds.count("maxpool2d") == 5
    assert kinds[-5:] == ["flatten", "dense", "dropout", "dense", "softmax"]
    shapes = model.output_shapes(1)
    assert shapes[kinds.index("flatten")] == (1, 18432)
    head = [layer for layer in model.layers if isinstance(layer, Dense)]
    assert [d.out_features for d in head] == [1024, 2]
    assert model.layers[-3].rate == 0.5
    assert len(model.stages) == 19


def test_scaled_models_produce_probabilities(tiny_custom, tiny_vgg, random_batch):
    for model in (tiny_custom, tiny_vgg):
        probs = model.forward(random_batch, training=False)
        assert probs.shape == (4, 2)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_build_model_rejects_unknown_names_and_small_inputs():
    with pytest.raises(ParameterError):
        build_model("resnet", 32)
    with pytest.raises(ShapeError):
        build_custom_net(8)
    with pytest.raises(ShapeError):
        build_vgg_baseline(16)


def test_initialisation_is_seeded_and_glorot_bounded():
    a = build_model("custom", 32, seed=3, width_divisor=8)
    b = build_model("custom", 32, seed=3, width_divisor=8)
    c = build_model("custom", 32, seed=4, width_divisor=8)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params if n.endswith(".W"))
    for layer in a.layers:
        if isinstance(layer, Conv2D):
            limit = np.sqrt(6.0 / (9 * (layer.in_channels + layer.out_channels)))
        elif isinstance(layer, Dense):
            limit = np.sqrt(6.0 / (layer.in_features + layer.out_features))
        else:
            continue
        assert np.abs(layer.params["W"]).max() <= limit + 1e-6
        assert np.all(layer.params["b"] == 0.0)


def test_parse_freeze_forms():
    assert parse_freeze(None, 19) is None
    assert parse_freeze("none", 19) is None
    assert parse_freeze("all", 19) == (1, 19)
    assert parse_freeze("L1-L16", 19) == (1, 16)
    assert parse_freeze((2, 5), 19) == (2, 5)


@pytest.mark.parametrize("text", ["L0-L3", "L5-L2", "L1-L20", "garbage"])
def test_parse_freeze_rejects_bad_ranges(text):
    with pytest.raises(ParameterError):
        parse_freeze(text, 19)


def test_freeze_l1_l16_leaves_only_the_head_trainable(tiny_vgg):
    set_trainable(tiny_vgg, "L1-L16")
    trainable = sorted(name for name, flag in tiny_vgg.trainable.items() if flag)
    assert trainable == ["dense_22.W", "dense_22.b"]


def test_freeze_contract_on_baseline(tiny_vgg):
    set_trainable(tiny_vgg, "L1-L16")
    frozen = {n: v.copy() for n, v in tiny_vgg.params.items() if not tiny_vgg.trainable[n]}
    head = {n: v.copy() for n, v in tiny_vgg.params.items() if tiny_vgg.trainable[n]}
    state = AdadeltaState.for_params(tiny_vgg.params, lr=0.01)
    rng = np.random.default_rng(0)
    for step in range(10):
        x = rng.uniform(size=(8, 3, 32, 32)).astype(np.float32)
        y = rng.integers(0, 2, size=8)
        train_step(tiny_vgg, x, y, state, RngStream(seed=step))
    for name, before in frozen.items():
        assert np.array_equal(before, tiny_vgg.params[name]), name
    assert any(not np.array_equal(before, tiny_vgg.params[n]) for n, before in head.items())


def test_no_freeze_updates_every_parameter_tensor(tiny_custom, random_batch):
    set_trainable(tiny_custom, "none")
    assert all(tiny_custom.trainable.values())
    before = {n: v.copy() for n, v in tiny_custom.params.items()}
    state = AdadeltaState.for_params(tiny_custom.params)
    train_step(tiny_custom, random_batch, np.array([0, 1, 0, 1]), state, dropout=False)
    for name, value in tiny_custom.params.items():
        assert not np.array_equal(before[name], value), name


def test_freeze_all_keeps_parameters_and_loss_fixed(tiny_custom, random_batch):
    set_trainable(tiny_custom, "all")
    before = {n: v.copy() for n, v in tiny_custom.params.items()}
    state = AdadeltaState.for_params(tiny_custom.params)
    y = np.array([1, 0, 1, 0])
    first, _ = train_step(tiny_custom, random_batch, y, state, dropout=False)
    second, _ = train_step(tiny_custom, random_batch, y, state, dropout=False)
    assert first == second
    for name, value in tiny_custom.params.items():
        assert np.array_equal(before[name], value)


def test_set_trainable_rejects_out_of_range(tiny_custom):
    with pytest.raises(ParameterError):
        set_trainable(tiny_custom, "L1-L25")


def test_topology_round_trip(tiny_vgg):
    set_trainable(tiny_vgg, "L1-L8")
    rebuilt = ModelGraph.from_topology(tiny_vgg.topology())
    assert rebuilt.topology() == tiny_vgg.topology()
    assert rebuilt.stages == tiny_vgg.stages


def test_layer_lookup(tiny_custom):
    assert tiny_custom.penultimate_dense_index() == 15
    assert tiny_custom.layer_index("flatten_13") == 12
    assert isinstance(tiny_custom.layers[tiny_custom.layer_index(2)], MaxPool2D)
    with pytest.raises(ParameterError):
        tiny_custom.layer_index("nope")
