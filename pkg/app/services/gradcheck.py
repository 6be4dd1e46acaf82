"""
Finite-difference verification of every layer's backward pass.

Each kind is checked on small random float64 instances: input gradients
and parameter gradients are compared with central differences of a
random linear projection of the layer output (or of the loss itself for
the softmax + cross-entropy composite).
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..exceptions import ParameterError
from ..models.malaria_models import GradcheckRow
from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU, Softmax2
from .networks import ModelGraph, set_trainable
from .tensor_core import RngStream, finite_diff_gradient, relative_error, rng_normal, rng_permutation, rng_uniform
from .training import AdadeltaState, adadelta_step, bce_with_softmax

logger = logging.getLogger(__name__)

GRADCHECK_STREAM = 0x6C4E
KINDS = ("conv2d", "maxpool2d", "relu", "dense", "dropout", "softmax2", "softmax_bce", "frozen")
TOLERANCE = 1e-3
STEP = 1e-4
KINK_MARGIN = 1e-3
MAX_RESAMPLES = 50


def _normal(stream: RngStream, *shape: int) -> np.ndarray:
    return rng_normal(stream, int(np.prod(shape))).reshape(shape)


def _as_float64(layer: Layer) -> Layer:
    for key in layer.params:
        layer.params[key] = layer.params[key].astype(np.float64)
    return layer


def _projection_error(layer: Layer, x: np.ndarray, stream: RngStream, training: bool = False) -> float:
    """
    Worst relative error over d/dx and d/dparams of sum(layer(x) * R).

    Dropout masks are replayed from a copy of the same mask stream on
    every evaluation.
    """
    mask_stream = stream.spawn(1)

    def run(value: np.ndarray) -> np.ndarray:
        return layer.forward(value, training=training, stream=mask_stream.copy() if training else None)

    out = run(x)
    projection = _normal(stream.spawn(0), *out.shape)
    analytic_x = layer.backward(projection)
    analytic_params = {key: np.array(grad, copy=True) for key, grad in layer.grads.items()}

    worst = relative_error(analytic_x, finite_diff_gradient(lambda v: np.sum(run(v) * projection), x, STEP))
    for key, original in list(layer.params.items()):
        def objective(value: np.ndarray, key=key) -> float:
            layer.params[key] = value
            return float(np.sum(run(x) * projection))

        numeric = finite_diff_gradient(objective, original, STEP)
        layer.params[key] = original
        worst = max(worst, relative_error(analytic_params[key], numeric))
    return worst


def _clear_of_kink(layer: Layer, x: np.ndarray) -> bool:
    """True when no fused-ReLU pre-activation lies within KINK_MARGIN of zero."""
    activation = layer.activation
    layer.activation = None
    try:
        pre = layer.forward(x)
    finally:
        layer.activation = activation
    return bool(np.all(np.abs(pre) > KINK_MARGIN))


def _resampled(make: Callable[[RngStream], tuple], stream: RngStream) -> tuple:
    for attempt in range(MAX_RESAMPLES):
        layer, x = make(stream.spawn(attempt))
        if _clear_of_kink(layer, x):
            return layer, x
    raise ParameterError("Could not draw a gradient-check instance away from ReLU kinks")


def _check_conv2d(stream: RngStream) -> float:
    def make(sub: RngStream):
        layer = _as_float64(Conv2D(2, 3, activation="relu", name="conv2d"))
        layer.params["W"] = _normal(sub.spawn(0), 3, 2, 3, 3) * 0.5
        layer.params["b"] = _normal(sub.spawn(1), 3) * 0.1
        return layer, _normal(sub.spawn(2), 2, 2, 5, 5)

    layer, x = _resampled(make, stream.spawn(0))
    return _projection_error(layer, x, stream.spawn(1))


def _check_maxpool2d(stream: RngStream) -> float:
    # well-separated distinct values keep every window's argmax stable
    shape = (2, 2, 5, 5)
    size = int(np.prod(shape))
    ranks = rng_permutation(stream.spawn(0), size).astype(np.float64)
    jitter = rng_uniform(stream.spawn(1), 0.0, 0.5, size)
    x = ((ranks + jitter) / 10.0 - size / 20.0).reshape(shape)
    return _projection_error(MaxPool2D(name="maxpool2d"), x, stream.spawn(2))


def _check_relu(stream: RngStream) -> float:
    z = _normal(stream.spawn(0), 3, 7)
    x = np.sign(z) * (np.abs(z) + 10 * KINK_MARGIN)
    return _projection_error(ReLU(name="relu"), x, stream.spawn(1))


def _check_dense(stream: RngStream) -> float:
    def make(sub: RngStream):
        layer = _as_float64(Dense(5, 4, activation="relu", name="dense"))
        layer.params["W"] = _normal(sub.spawn(0), 5, 4) * 0.5
        layer.params["b"] = _normal(sub.spawn(1), 4) * 0.1
        return layer, _normal(sub.spawn(2), 3, 5)

    layer, x = _resampled(make, stream.spawn(0))
    return _projection_error(layer, x, stream.spawn(1))


def _check_dropout(stream: RngStream) -> float:
    x = _normal(stream.spawn(0), 3, 6)
    return _projection_error(Dropout(0.5, name="dropout"), x, stream.spawn(1), training=True)


def _check_softmax2(stream: RngStream) -> float:
    logits = _normal(stream.spawn(0), 4, 2) * 2.0
    return _projection_error(Softmax2(name="softmax2"), logits, stream.spawn(1))


def _check_softmax_bce(stream: RngStream) -> float:
    logits = _normal(stream.spawn(0), 4, 2) * 2.0
    y = (rng_uniform(stream.spawn(1), 0.0, 1.0, 4) < 0.5).astype(np.int64)
    softmax = Softmax2(name="softmax")

    def loss(value: np.ndarray) -> float:
        return bce_with_softmax(softmax.forward(value), y)[0]

    _, analytic = bce_with_softmax(softmax.forward(logits), y)
    return relative_error(analytic, finite_diff_gradient(loss, logits, STEP))


def _frozen_graph(stream: RngStream) -> ModelGraph:
    conv = _as_float64(Conv2D(2, 2, activation=None, name="conv2d_1"))
    dense = _as_float64(Dense(2 * 3 * 3, 2, name="dense_3"))
    conv.params["W"] = _normal(stream.spawn(0), 2, 2, 3, 3) * 0.5
    conv.params["b"] = _normal(stream.spawn(1), 2) * 0.1
    dense.params["W"] = _normal(stream.spawn(2), 18, 2) * 0.3
    dense.params["b"] = np.zeros(2)
    layers = [conv, Flatten(name="flatten_2"), dense, Softmax2(name="softmax_4")]
    return set_trainable(ModelGraph("frozen-check", layers, (2, 3, 3)), "L1-L1")


def _check_frozen(stream: RngStream) -> float:
    """
    Gradients flow through a frozen stage to the input, while an
    optimizer step leaves the frozen parameters bit-identical.
    """
    model = _frozen_graph(stream.spawn(0))
    x = _normal(stream.spawn(1), 2, 2, 3, 3)
    y = np.array([0, 1])

    def loss(value: np.ndarray) -> float:
        return bce_with_softmax(model.forward(value, training=False), y)[0]

    _, d_logits = bce_with_softmax(model.forward(x, training=False), y)
    analytic = model.backward(d_logits, wrt_logits=True, stop_at=0)
    worst = relative_error(analytic, finite_diff_gradient(loss, x, STEP))

    frozen_before = {k: v.copy() for k, v in model.params.items() if not model.trainable[k]}
    adadelta_step(model.params, model.grads(), AdadeltaState.for_params(model.params), model.trainable)
    for name, before in frozen_before.items():
        if not np.array_equal(before, model.params[name]):
            return float("inf")
    return worst


CHECKS: Dict[str, Callable[[RngStream], float]] = {
    "conv2d": _check_conv2d,
    "maxpool2d": _check_maxpool2d,
    "relu": _check_relu,
    "dense": _check_dense,
    "dropout": _check_dropout,
    "softmax2": _check_softmax2,
    "softmax_bce": _check_softmax_bce,
    "frozen": _check_frozen,
}


def run_gradcheck(
    instances: int = 100,
    seed: int = 0,
    kinds: Optional[Sequence[str]] = None,
    tolerance: float = TOLERANCE,
) -> List[GradcheckRow]:
    """
    Run the finite-difference suite.

    Args:
        instances: Random instances per layer kind
        seed: Seed of the instance streams
        kinds: Subset of KINDS (all when None)
        tolerance: Worst relative error a kind may reach and still pass

    Returns:
        One GradcheckRow per kind, in KINDS order
    """
    selected = list(KINDS) if kinds is None else list(kinds)
    unknown = [kind for kind in selected if kind not in CHECKS]
    if unknown:
        raise ParameterError(f"Unknown gradient-check kind(s) {unknown}; expected some of {list(KINDS)}")
    if instances < 1:
        raise ParameterError(f"instances must be >= 1, got {instances}")

    root = RngStream(seed=seed, stream_id=GRADCHECK_STREAM)
    rows = []
    for kind in selected:
        kind_stream = root.spawn(KINDS.index(kind))
        worst = max(CHECKS[kind](kind_stream.spawn(i)) for i in range(instances))
        rows.append(GradcheckRow(kind=kind, instances=instances, worst_rel_error=worst, passed=worst < tolerance))
        level = logging.INFO if worst < tolerance else logging.ERROR
        logger.log(level, f"gradcheck {kind}: worst relative error {worst:.3e} over {instances} instances")
    return rows


def gradcheck_table(rows: Sequence[GradcheckRow]) -> str:
    lines = [f"{'kind':<12} {'instances':>9} {'worst_rel_error':>16}  status"]
    for row in rows:
        status = "PASS" if row.passed else "FAIL"
        lines.append(f"{row.kind:<12} {row.instances:>9} {row.worst_rel_error:>16.3e}  {status}")
    return "\n".join(lines) + "\n"
