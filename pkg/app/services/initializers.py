"""
Weight initialisation.
"""
from typing import Sequence

import numpy as np

from ..exceptions import ParameterError
from .tensor_core import FP32, RngStream, Tensor, rng_uniform


def glorot_init(shape: Sequence[int], fan_in: int, fan_out: int, stream: RngStream) -> Tensor:
    """
    Glorot/Xavier uniform initialisation.

    Args:
        shape: Weight tensor shape
        fan_in: Number of inputs feeding one unit
        fan_out: Number of units fed by one input
        stream: Random stream the draws come from

    Returns:
        FP32 tensor uniform in +-sqrt(6 / (fan_in + fan_out))
    """
    if fan_in < 1 or fan_out < 1:
        raise ParameterError(f"Fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    size = int(np.prod(shape))
    return rng_uniform(stream, -limit, limit, size).astype(FP32).reshape(tuple(shape))


def zero_bias(size: int) -> Tensor:
    return np.zeros(size, dtype=FP32)
