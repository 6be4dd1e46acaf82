"""
Forward/backward definitions for every layer kind used by the networks.

Layers compute in the dtype of their input, so the same code runs the
FP32 training path and the FP64 gradient-check path. Parameters are
stored as FP32 and cast on the fly when a float64 input arrives.
"""
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import NumericError, ParameterError, ShapeError
from ..models.malaria_models import LayerSpec
from .tensor_core import FP32, RngStream, Tensor, rng_uniform

KERNEL = 3
POOL = 2
PROB_EPS = 1e-7


class Layer:
    """Base layer: parameters, their gradients and a cached forward pass."""

    kind = "layer"

    def __init__(self, name: Optional[str] = None):
        self.name = name or self.kind
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x: Tensor, training: bool = False, stream: Optional[RngStream] = None) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def hyperparams(self) -> Dict[str, object]:
        return {}

    def spec(self) -> LayerSpec:
        return LayerSpec(kind=self.kind, name=self.name, hyperparams=self.hyperparams())

    def _param(self, key: str, dtype) -> np.ndarray:
        return self.params[key].astype(dtype, copy=False)


class Conv2D(Layer):
    """
    3x3 convolution, stride 1, "same" padding, optional fused ReLU.

    Computes a true convolution (kernel flipped), so the response to a
    unit impulse reproduces the kernel centred on the impulse.
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, activation: Optional[str] = "relu", name: Optional[str] = None):
        super().__init__(name)
        if activation not in (None, "relu"):
            raise ParameterError(f"Unsupported activation '{activation}' for {self.name}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        self.params["W"] = np.zeros((out_channels, in_channels, KERNEL, KERNEL), dtype=FP32)
        self.params["b"] = np.zeros(out_channels, dtype=FP32)
        self._cache = None

    def forward(self, x, training=False, stream=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: expected (batch, {self.in_channels}, H, W) input, got {x.shape}"
            )
        n, c, h, w = x.shape
        flipped = self._param("W", x.dtype)[:, :, ::-1, ::-1]
        bias = self._param("b", x.dtype)

        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * KERNEL * KERNEL)
        out = cols @ flipped.reshape(self.out_channels, -1).T + bias
        out = out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)

        mask = None
        if self.activation == "relu":
            mask = out > 0
            out = np.where(mask, out, 0).astype(x.dtype, copy=False)
        self._cache = (cols, x.shape, mask, flipped)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        cols, (n, c, h, w), mask, flipped = self._cache
        if mask is not None:
            grad = grad * mask
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)

        d_flipped = (g.T @ cols).reshape(flipped.shape)
        self.grads["W"] = np.ascontiguousarray(d_flipped[:, :, ::-1, ::-1])
        self.grads["b"] = g.sum(axis=0)

        d_cols = (g @ flipped.reshape(self.out_channels, -1)).reshape(n, h, w, c, KERNEL, KERNEL)
        d_padded = np.zeros((n, c, h + 2, w + 2), dtype=grad.dtype)
        for i in range(KERNEL):
            for j in range(KERNEL):
                d_padded[:, :, i:i + h, j:j + w] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return d_padded[:, :, 1:-1, 1:-1]

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        return (n, self.out_channels, h, w)

    def hyperparams(self):
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel": KERNEL, "stride": 1, "padding": "same", "activation": self.activation,
        }


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2d"

    def forward(self, x, training=False, stream=None):
        if x.ndim != 4 or x.shape[2] < POOL or x.shape[3] < POOL:
            raise ShapeError(f"{self.name}: spatial dims must be >= 2, got {x.shape}")
        n, c, h, w = x.shape
        h2, w2 = h // POOL, w // POOL
        windows = (
            x[:, :, :h2 * POOL, :w2 * POOL]
            .reshape(n, c, h2, POOL, w2, POOL)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, POOL * POOL)
        )
        # argmax returns the first maximum in row-major window order
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out

    def backward(self, grad):
        (n, c, h, w), arg = self._cache
        h2, w2 = h // POOL, w // POOL
        routed = np.zeros((n, c, h2, w2, POOL * POOL), dtype=grad.dtype)
        np.put_along_axis(routed, arg[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, h2, w2, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        dx[:, :, :h2 * POOL, :w2 * POOL] = routed.reshape(n, c, h2 * POOL, w2 * POOL)
        return dx

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        if h < POOL or w < POOL:
            raise ShapeError(f"{self.name}: spatial dims must be >= 2, got {input_shape}")
        return (n, c, h // POOL, w // POOL)

    def hyperparams(self):
        return {"pool": POOL, "stride": POOL}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, stream=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        # gradient at exactly zero is defined as zero
        return grad * self._mask


class Dense(Layer):
    """Fully connected layer x @ W + b with optional fused ReLU."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: Optional[str] = None, name: Optional[str] = None):
        super().__init__(name)
        if activation not in (None, "relu"):
            raise ParameterError(f"Unsupported activation '{activation}' for {self.name}")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.params["W"] = np.zeros((in_features, out_features), dtype=FP32)
        self.params["b"] = np.zeros(out_features, dtype=FP32)

    def forward(self, x, training=False, stream=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (batch, {self.in_features}) input, got {x.shape}")
        out = x @ self._param("W", x.dtype) + self._param("b", x.dtype)
        mask = None
        if self.activation == "relu":
            mask = out > 0
            out = np.where(mask, out, 0).astype(x.dtype, copy=False)
        self._cache = (x, mask)
        return out

    def backward(self, grad):
        x, mask = self._cache
        if mask is not None:
            grad = grad * mask
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self._param("W", grad.dtype).T

    def output_shape(self, input_shape):
        n, features = input_shape
        if features != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} features, got {features}")
        return (n, self.out_features)

    def hyperparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features, "activation": self.activation}


class Dropout(Layer):
    """Inverted dropout: identity in eval mode, scaled survivors in train mode."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5, name: Optional[str] = None):
        super().__init__(name)
        if not 0.0 < rate < 1.0:
            raise ParameterError(f"Dropout rate must lie in (0, 1), got {rate}")
        self.rate = rate
        self._keep = None

    def forward(self, x, training=False, stream=None):
        if not training:
            self._keep = None
            return x
        if stream is None:
            raise ParameterError(f"{self.name}: train-mode dropout needs a random stream")
        keep = rng_uniform(stream, 0.0, 1.0, x.size).reshape(x.shape) >= self.rate
        self._keep = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        return x * self._keep

    def backward(self, grad):
        if self._keep is None:
            return grad
        return grad * self._keep

    def hyperparams(self):
        return {"rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False, stream=None):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected rank-4 input, got {x.shape}")
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def output_shape(self, input_shape):
        n = input_shape[0]
        return (n, int(np.prod(input_shape[1:])))


class Softmax2(Layer):
    """
    Two-way softmax over the last axis with max subtraction.

    Outputs are clipped to [PROB_EPS, 1 - PROB_EPS] so saturated logits
    still give probabilities strictly inside (0, 1).
    """

    kind = "softmax"

    def forward(self, x, training=False, stream=None):
        if x.ndim != 2 or x.shape[1] != 2:
            raise ShapeError(f"{self.name}: expected (batch, 2) logits, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError(f"{self.name}: non-finite logits")
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self._out = np.clip(exp / exp.sum(axis=1, keepdims=True), PROB_EPS, 1.0 - PROB_EPS)
        return self._out

    def backward(self, grad):
        p = self._out
        return p * (grad - np.sum(grad * p, axis=1, keepdims=True))


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, MaxPool2D, ReLU, Dense, Dropout, Flatten, Softmax2)
}


def layer_from_spec(spec: LayerSpec) -> Layer:
    """Rebuild a zero-initialised layer from its spec."""
    hp = dict(spec.hyperparams)
    if spec.kind == "conv2d":
        return Conv2D(hp["in_channels"], hp["out_channels"], hp.get("activation"), name=spec.name)
    if spec.kind == "dense":
        return Dense(hp["in_features"], hp["out_features"], hp.get("activation"), name=spec.name)
    if spec.kind == "dropout":
        return Dropout(hp["rate"], name=spec.name)
    return LAYER_TYPES[spec.kind](name=spec.name)
