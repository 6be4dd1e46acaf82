"""
Dense FP32 tensor helpers, counter-based random streams and the
finite-difference gradient oracle.

Tensors are plain numpy arrays stored as float32. Random streams wrap
numpy's Philox-4x64 bit generator keyed by (seed, stream_id) with an
explicit block counter, so draws never depend on the platform default
generator or on global state.
"""
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..exceptions import OracleError, RangeError, ShapeError, NumericError

FP32 = np.float32
Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> Tensor:
    """
    Create a tensor of the given shape with every element set to `fill`.

    Args:
        shape: Positive dimension sizes
        fill: Value for every element

    Returns:
        FP32 array of the requested shape
    """
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("Tensor shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"All tensor dimensions must be >= 1, got {dims}")
    return np.full(dims, fill, dtype=FP32)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without copying data; sizes must agree exactly."""
    dims = tuple(int(d) for d in shape)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"Cannot reshape {x.shape} ({x.size} elements) to {dims}")
    return x.reshape(dims)


def assert_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"Non-finite values in {what}")
    return x


def _splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """
    Deterministic random stream.

    Each call that draws n raw 64-bit words advances `counter` by
    ceil(n / 4), the number of Philox blocks consumed.
    """
    seed: int
    stream_id: int = 0
    counter: int = 0

    def raw(self, n: int) -> np.ndarray:
        """Draw n raw uint64 words and advance the block counter."""
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        counter = np.array([self.counter & _MASK64, 0, 0, 0], dtype=np.uint64)
        bitgen = np.random.Philox(key=key, counter=counter)
        words = bitgen.random_raw(n)
        self.counter += -(-n // _WORDS_PER_BLOCK)
        return np.asarray(words, dtype=np.uint64)

    def spawn(self, key: int) -> "RngStream":
        """Child stream with a derived stream id and a fresh counter."""
        child_id = _splitmix64((self.stream_id ^ _splitmix64(int(key) & _MASK64)) & _MASK64)
        return RngStream(seed=self.seed, stream_id=child_id, counter=0)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)


def _unit_interval(stream: RngStream, n: int) -> np.ndarray:
    # top 53 bits -> double in [0, 1)
    words = stream.raw(n)
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def rng_uniform(stream: RngStream, lo: float, hi: float, n: int) -> np.ndarray:
    """
    Draw n values uniformly from [lo, hi).

    Args:
        stream: Random stream (counter advances by ceil(n/4))
        lo: Inclusive lower bound
        hi: Exclusive upper bound
        n: Number of draws

    Returns:
        float64 array of length n
    """
    if not lo < hi:
        raise RangeError(f"rng_uniform requires lo < hi, got lo={lo}, hi={hi}")
    values = lo + (hi - lo) * _unit_interval(stream, n)
    # rounding can land exactly on hi when the interval is tiny
    return np.where(values >= hi, np.nextafter(hi, lo), values)


def rng_normal(stream: RngStream, n: int) -> np.ndarray:
    """Standard normal draws via Box-Muller over the stream's uniforms."""
    pairs = -(-n // 2)
    u = _unit_interval(stream, 2 * pairs)
    u1 = 1.0 - u[:pairs]
    u2 = u[pairs:]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]


def rng_permutation(stream: RngStream, n: int) -> np.ndarray:
    """Random permutation of range(n)."""
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    return np.argsort(_unit_interval(stream, n), kind="stable").astype(np.int64)


def finite_diff_gradient(
    f: Callable[[Tensor], float],
    x: Tensor,
    h: float = 1e-3,
) -> np.ndarray:
    """
    Central-difference gradient estimate of a scalar function.

    The function is evaluated on a float64 copy of x, so callers that
    compute in the input dtype get the FP64 path automatically.

    Args:
        f: Scalar-valued function of a tensor
        x: Point of evaluation
        h: Step size

    Returns:
        float64 array shaped like x with (f(x+h e_i) - f(x-h e_i)) / 2h
    """
    point = np.array(x, dtype=np.float64, copy=True)
    flat = point.reshape(-1)
    grad = np.zeros_like(flat)

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(f(point))
        flat[i] = original - h
        f_minus = float(f(point))
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"Non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)

    return grad.reshape(point.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst elementwise |a-b| / max(1e-8, |a|+|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"relative_error shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))
