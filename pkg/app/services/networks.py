"""
ModelGraph container and builders for the custom 19-layer network and
the VGG16-style baseline, plus per-stage trainability control.
"""
import logging
import re
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import ParameterError, ShapeError
from ..models.malaria_models import LayerSpec
from .initializers import glorot_init, zero_bias
from .layers import (
    KERNEL,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    Softmax2,
    layer_from_spec,
)
from .tensor_core import FP32, RngStream, Tensor

logger = logging.getLogger(__name__)

CUSTOM_CONV_WIDTHS = (32, 32, 64, 64, 128, 128, 256, 256)
CUSTOM_DENSE_WIDTH = 256
VGG_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
VGG_HEAD_WIDTH = 1024
INIT_STREAM = 0x1A17

FreezeRange = Union[None, str, Tuple[int, int]]


class ModelGraph:
    """
    Ordered layer sequence with named parameters and a trainable mask.

    `stages` groups graph layers under the 1-based "L" numbering used by
    freeze ranges; stage k covers the graph layers in stages[k - 1].
    """

    def __init__(
        self,
        name: str,
        layers: Sequence[Layer],
        input_shape: Tuple[int, ...],
        stages: Optional[List[List[int]]] = None,
    ):
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.stages = stages or [[i] for i in range(len(self.layers))]
        self.trainable: Dict[str, bool] = {key: True for key in self.params}
        self.mode = "eval"
        self.output_shapes()

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.params.items()
        }

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.grads.items()
        }

    def train(self) -> "ModelGraph":
        self.mode = "train"
        return self

    def eval(self) -> "ModelGraph":
        self.mode = "eval"
        return self

    def output_shapes(self, batch: int = 1) -> List[Tuple[int, ...]]:
        shape: Tuple[int, ...] = (batch, *self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        if shapes and shapes[-1][1:] != (2,):
            raise ShapeError(f"{self.name}: final output must be 2-way, got {shapes[-1]}")
        return shapes

    def forward(
        self,
        x: Tensor,
        training: Optional[bool] = None,
        stream: Optional[RngStream] = None,
        until: Optional[int] = None,
    ) -> Tensor:
        """
        Run the layers in order.

        Args:
            x: Input batch (batch, C, H, W)
            training: Overrides the graph mode when given
            stream: Random stream for dropout masks (train mode only)
            until: Stop after this graph-layer index and return its output
        """
        if training is None:
            training = self.mode == "train"
        out = x
        for index, layer in enumerate(self.layers):
            sub = stream.spawn(index) if stream is not None and isinstance(layer, Dropout) else None
            out = layer.forward(out, training=training, stream=sub)
            if until is not None and index == until:
                break
        return out

    def backward(self, grad: Tensor, wrt_logits: bool = False, stop_at: int = 0) -> Tensor:
        """
        Backpropagate from the output down to graph layer `stop_at`.

        With `wrt_logits` the incoming gradient is taken with respect to
        the softmax input and the final softmax layer is skipped.
        """
        last = len(self.layers) - 1
        if wrt_logits:
            if not isinstance(self.layers[-1], Softmax2):
                raise ParameterError(f"{self.name}: wrt_logits needs a final softmax layer")
            last -= 1
        for index in range(last, stop_at - 1, -1):
            grad = self.layers[index].backward(grad)
        return grad

    def first_trainable_layer(self) -> int:
        """Lowest graph-layer index holding a trainable parameter."""
        for index, layer in enumerate(self.layers):
            if any(self.trainable[f"{layer.name}.{key}"] for key in layer.params):
                return index
        return len(self.layers)

    def predict_proba(self, x: Tensor, batch_size: int = 64) -> np.ndarray:
        """Eval-mode softmax outputs, batched."""
        outputs = [
            self.forward(x[start:start + batch_size], training=False)
            for start in range(0, len(x), batch_size)
        ]
        return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, 2), dtype=FP32)

    def layer_index(self, layer: Union[int, str]) -> int:
        if isinstance(layer, int):
            if not 0 <= layer < len(self.layers):
                raise ParameterError(f"{self.name}: layer index {layer} out of range")
            return layer
        for index, candidate in enumerate(self.layers):
            if candidate.name == layer:
                return index
        raise ParameterError(f"{self.name}: no layer named '{layer}'")

    def penultimate_dense_index(self) -> int:
        dense = [i for i, layer in enumerate(self.layers) if isinstance(layer, Dense)]
        if len(dense) < 2:
            raise ParameterError(f"{self.name}: needs two dense layers to tap features")
        return dense[-2]

    def topology(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.spec().model_dump() for layer in self.layers],
            "stages": self.stages,
            "trainable": dict(sorted(self.trainable.items())),
        }

    @classmethod
    def from_topology(cls, topology: Dict[str, object]) -> "ModelGraph":
        layers = [layer_from_spec(LayerSpec(**spec)) for spec in topology["layers"]]
        model = cls(
            topology["name"],
            layers,
            tuple(topology["input_shape"]),
            stages=[list(stage) for stage in topology["stages"]],
        )
        model.trainable.update({k: bool(v) for k, v in topology.get("trainable", {}).items()})
        return model


def initialize_params(model: ModelGraph, seed: int) -> ModelGraph:
    """Glorot-uniform weights, zero biases, one derived stream per layer."""
    root = RngStream(seed=seed, stream_id=INIT_STREAM)
    for index, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            fan_in = layer.in_channels * KERNEL * KERNEL
            fan_out = layer.out_channels * KERNEL * KERNEL
        elif isinstance(layer, Dense):
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            continue
        weights = layer.params["W"]
        weights[...] = glorot_init(weights.shape, fan_in, fan_out, root.spawn(index))
        layer.params["b"][...] = zero_bias(layer.params["b"].size)
    return model


def _pooled(size: int, pools: int) -> int:
    for _ in range(pools):
        size //= 2
    return size


def build_custom_net(
    input_size: int = 200,
    conv_widths: Sequence[int] = CUSTOM_CONV_WIDTHS,
    dense_width: int = CUSTOM_DENSE_WIDTH,
    dropout_rate: float = 0.5,
    seed: int = 0,
    initialize: bool = True,
) -> ModelGraph:
    """
    Custom 19-layer network: four [conv, conv, pool] blocks, flatten,
    two dense+dropout blocks and a 2-way softmax head.

    Args:
        input_size: Square input side in pixels (200 for the full model)
        conv_widths: Eight conv channel widths
        dense_width: Width of both hidden dense layers
        dropout_rate: Rate of both dropout layers
        seed: Initialisation seed
        initialize: Glorot-initialise weights (zeros otherwise)
    """
    if len(conv_widths) != 8:
        raise ParameterError(f"Custom network needs 8 conv widths, got {len(conv_widths)}")
    if _pooled(input_size, 4) < 1:
        raise ShapeError(f"Input size {input_size} is too small for four 2x2 pools")

    layers: List[Layer] = []
    channels = 3
    for block in range(4):
        for width in conv_widths[2 * block:2 * block + 2]:
            layers.append(Conv2D(channels, int(width), activation="relu"))
            channels = int(width)
        layers.append(MaxPool2D())
    flat = channels * _pooled(input_size, 4) ** 2
    layers += [
        Flatten(),
        Dense(flat, dense_width, activation="relu"),
        Dropout(dropout_rate),
        Dense(dense_width, dense_width, activation="relu"),
        Dropout(dropout_rate),
        Dense(dense_width, 2),
        Softmax2(),
    ]
    _name_layers(layers)
    model = ModelGraph("custom", layers, (3, input_size, input_size))
    if initialize:
        initialize_params(model, seed)
    logger.debug(f"Built custom net: {len(layers)} layers, flatten width {flat}")
    return model


def build_vgg_baseline(
    input_size: int = 200,
    width_divisor: int = 1,
    head_width: int = VGG_HEAD_WIDTH,
    dropout_rate: float = 0.5,
    seed: int = 0,
    initialize: bool = True,
) -> ModelGraph:
    """
    VGG16 convolutional topology (13 conv, 5 max pools) with a
    dense-1024 / dropout / dense-2 / softmax head.

    Freeze stages: L1-L13 are the conv layers (pools 1-4 ride with the
    conv closing their block), L14 the last pool, L15 flatten, L16
    dense-1024, L17 dropout, L18 dense-2, L19 softmax.
    """
    if width_divisor < 1:
        raise ParameterError(f"width_divisor must be >= 1, got {width_divisor}")
    if _pooled(input_size, 5) < 1:
        raise ShapeError(f"Input size {input_size} is too small for five 2x2 pools")

    layers: List[Layer] = []
    stages: List[List[int]] = []
    channels = 3
    for block_index, block in enumerate(VGG_BLOCKS):
        for width in block:
            width = max(1, width // width_divisor)
            layers.append(Conv2D(channels, width, activation="relu"))
            stages.append([len(layers) - 1])
            channels = width
        layers.append(MaxPool2D())
        if block_index < len(VGG_BLOCKS) - 1:
            stages[-1].append(len(layers) - 1)
        else:
            stages.append([len(layers) - 1])
    flat = channels * _pooled(input_size, 5) ** 2
    for layer in (
        Flatten(),
        Dense(flat, head_width, activation="relu"),
        Dropout(dropout_rate),
        Dense(head_width, 2),
        Softmax2(),
    ):
        layers.append(layer)
        stages.append([len(layers) - 1])
    _name_layers(layers)
    model = ModelGraph("vgg-baseline", layers, (3, input_size, input_size), stages=stages)
    if initialize:
        initialize_params(model, seed)
    logger.debug(f"Built VGG baseline: {len(layers)} graph layers, flatten width {flat}")
    return model


def _name_layers(layers: Sequence[Layer]) -> None:
    for index, layer in enumerate(layers, start=1):
        layer.name = f"{layer.kind}_{index}"


def build_model(
    name: str,
    input_size: int = 200,
    seed: int = 0,
    width_divisor: int = 1,
    initialize: bool = True,
) -> ModelGraph:
    """Factory keyed by preset name; width_divisor shrinks every width for desk runs."""
    if name == "custom":
        widths = tuple(max(1, w // width_divisor) for w in CUSTOM_CONV_WIDTHS)
        return build_custom_net(
            input_size, widths, max(2, CUSTOM_DENSE_WIDTH // width_divisor), seed=seed, initialize=initialize
        )
    if name == "vgg-baseline":
        return build_vgg_baseline(
            input_size, width_divisor, max(2, VGG_HEAD_WIDTH // width_divisor), seed=seed, initialize=initialize
        )
    raise ParameterError(f"Unknown model '{name}', expected 'custom' or 'vgg-baseline'")


_RANGE = re.compile(r"^L?(\d+)\s*-\s*L?(\d+)$", re.IGNORECASE)


def parse_freeze(frozen: FreezeRange, depth: int) -> Optional[Tuple[int, int]]:
    """
    Normalise a freeze request to an inclusive 1-based stage range.

    Accepts None/"none", "all", "L<a>-L<b>" or an (a, b) tuple.
    """
    if frozen is None:
        return None
    if isinstance(frozen, str):
        text = frozen.strip()
        if text.lower() == "none":
            return None
        if text.lower() == "all":
            return (1, depth)
        match = _RANGE.match(text)
        if not match:
            raise ParameterError(f"Cannot parse freeze range '{frozen}', expected e.g. 'L1-L16'")
        first, last = int(match.group(1)), int(match.group(2))
    else:
        first, last = (int(v) for v in frozen)
    if not 1 <= first <= last <= depth:
        raise ParameterError(f"Freeze range L{first}-L{last} outside model depth 1..{depth}")
    return first, last


def set_trainable(model: ModelGraph, frozen: FreezeRange) -> ModelGraph:
    """
    Mark the parameters of the stages in `frozen` as non-trainable and
    every other parameter as trainable.
    """
    stage_range = parse_freeze(frozen, len(model.stages))
    for key in model.trainable:
        model.trainable[key] = True
    if stage_range is not None:
        first, last = stage_range
        for stage in model.stages[first - 1:last]:
            for index in stage:
                layer = model.layers[index]
                for key in layer.params:
                    model.trainable[f"{layer.name}.{key}"] = False
    frozen_count = sum(not flag for flag in model.trainable.values())
    logger.info(f"{model.name}: {frozen_count}/{len(model.trainable)} parameter tensors frozen")
    return model
