"""
Deep-feature extraction and an RBF-kernel SVM trained by sequential
minimal optimization.

The dual is solved in its minimisation form
    min_a 1/2 a'Qa - e'a,  Q_ij = y_i y_j K_ij,  0 <= a_i <= C,  y'a = 0
with maximal-violating-pair working-set selection.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..exceptions import ParameterError, ShapeError, TrainingError
from .checkpoint import Checkpoint
from .networks import ModelGraph
from .tensor_core import FP32

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.1
DEFAULT_C = 1.0
DEFAULT_TOL = 1e-3
TAU = 1e-12


@dataclass
class FeatureMatrix:
    """One feature row per sample with labels in {-1, +1}."""
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ShapeError(f"Feature rows must be 2-D, got {self.rows.shape}")
        if len(self.rows) != len(self.labels):
            raise ShapeError(f"{len(self.rows)} feature rows but {len(self.labels)} labels")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ParameterError("SVM labels must be -1 or +1")

    @classmethod
    def from_binary(cls, rows: np.ndarray, labels01: np.ndarray) -> "FeatureMatrix":
        return cls(np.asarray(rows), np.where(np.asarray(labels01) == 1, 1, -1))


class FeatureScaler:
    """Per-dimension standardization with training-set statistics."""

    def __init__(self):
        self.mean: Optional[np.ndarray] = None
        self.scale: Optional[np.ndarray] = None

    def fit(self, rows: np.ndarray) -> "FeatureScaler":
        rows = np.asarray(rows, dtype=np.float64)
        self.mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        constant = std == 0
        if constant.any():
            logger.warning(f"{int(constant.sum())} feature dimension(s) have zero variance; left unscaled")
        self.scale = np.where(constant, 1.0, std)
        return self

    def transform(self, rows: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ParameterError("FeatureScaler must be fitted before transform")
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.mean.shape[0]:
            raise ParameterError(f"Expected {self.mean.shape[0]} features, got {rows.shape[-1]}")
        return (rows - self.mean) / self.scale

    def fit_transform(self, rows: np.ndarray) -> np.ndarray:
        return self.fit(rows).transform(rows)


@dataclass
class KernelSvmModel:
    """Support vectors, dual coefficients a_i y_i and bias of a trained SVM."""
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    gamma: float = DEFAULT_GAMMA
    C: float = DEFAULT_C
    scaler: Optional[FeatureScaler] = None
    alpha: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        """Decision values for raw (unscaled) feature rows."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ParameterError(f"SVM expects {self.dim}-dim features, got {x.shape[1]}")
        if self.scaler is not None:
            x = self.scaler.transform(x)
        return rbf_kernel_matrix(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Labels in {-1, +1}; a zero decision value maps to +1."""
        return np.where(self.decision_function(x) >= 0.0, 1, -1)


def extract_features(
    model: ModelGraph,
    x: np.ndarray,
    layer: Optional[Union[int, str]] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """
    Eval-mode activations at a graph layer (penultimate dense by default).

    Dense layers carry their ReLU, so the tap is post-activation and
    before the following dropout.
    """
    index = model.penultimate_dense_index() if layer is None else model.layer_index(layer)
    chunks = [
        model.forward(x[start:start + batch_size], training=False, until=index)
        for start in range(0, len(x), batch_size)
    ]
    features = np.concatenate(chunks, axis=0)
    features = features.reshape(len(features), -1).astype(FP32)
    logger.info(f"Extracted {features.shape[1]}-dim features from {model.layers[index].name} for {len(features)} samples")
    return features


def rbf_kernel(u: np.ndarray, v: np.ndarray, gamma: float = DEFAULT_GAMMA) -> float:
    """exp(-gamma * ||u - v||^2)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ParameterError(f"Kernel inputs differ in dimension: {u.shape[0]} vs {v.shape[0]}")
    diff = u - v
    return float(np.exp(-gamma * diff @ diff))


def rbf_kernel_matrix(a: np.ndarray, b: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"Kernel inputs differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _violation_bounds(alpha: np.ndarray, grad: np.ndarray, y: np.ndarray, C: float):
    minus_yg = -y * grad
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    return minus_yg, up, low


def smo_train(
    features: FeatureMatrix,
    C: float = DEFAULT_C,
    gamma: float = DEFAULT_GAMMA,
    tol: float = DEFAULT_TOL,
    max_iter: int = 100_000,
    scale: bool = False,
) -> KernelSvmModel:
    """
    Train an RBF SVM with SMO.

    Args:
        features: Training rows and +-1 labels
        C: Box constraint
        gamma: RBF width
        tol: Stop when the maximal KKT violation m - M falls to tol
        max_iter: Hard bound on pair updates
        scale: Standardize features with a FeatureScaler first

    Returns:
        KernelSvmModel keeping only rows with a_i > 0
    """
    y = features.labels.astype(np.float64)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise TrainingError("SVM training needs at least one sample of each class")
    if C <= 0:
        raise ParameterError(f"C must be positive, got {C}")

    scaler = FeatureScaler().fit(features.rows) if scale else None
    x = scaler.transform(features.rows) if scaler else np.asarray(features.rows, dtype=np.float64)
    n = len(y)
    K = rbf_kernel_matrix(x, x, gamma)
    Q = (y[:, None] * y[None, :]) * K

    alpha = np.zeros(n)
    grad = -np.ones(n)
    iterations = 0
    while True:
        minus_yg, up, low = _violation_bounds(alpha, grad, y, C)
        i = int(np.flatnonzero(up)[np.argmax(minus_yg[up])])
        j = int(np.flatnonzero(low)[np.argmin(minus_yg[low])])
        m, M = minus_yg[i], minus_yg[j]
        if m - M <= tol:
            break
        if iterations >= max_iter:
            logger.warning(f"SMO stopped at max_iter={max_iter} with violation {m - M:.3g}")
            break
        iterations += 1

        # step along d (d_i = y_i, d_j = -y_j) keeps y'a constant
        eta = max(K[i, i] + K[j, j] - 2.0 * K[i, j], TAU)
        step = (m - M) / eta
        step = min(step, C - alpha[i] if y[i] > 0 else alpha[i])
        step = min(step, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += step * y[i]
        alpha[j] -= step * y[j]
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        grad += step * (y[i] * Q[:, i] - y[j] * Q[:, j])

    free = (alpha > 0) & (alpha < C)
    minus_yg, _, _ = _violation_bounds(alpha, grad, y, C)
    bias = float(minus_yg[free].mean()) if free.any() else float((m + M) / 2.0)

    support = alpha > 0
    logger.info(
        f"SMO converged in {iterations} updates: {int(support.sum())} support vectors "
        f"({int(free.sum())} free), violation {m - M:.3g}"
    )
    return KernelSvmModel(
        support_vectors=x[support],
        dual_coef=(alpha * y)[support],
        bias=bias,
        gamma=gamma,
        C=C,
        scaler=scaler,
        alpha=alpha,
    )


def svm_predict(model: KernelSvmModel, x: np.ndarray) -> Tuple[int, float]:
    """Label in {-1, +1} and decision value for one feature vector (ties -> +1)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.dim:
        raise ParameterError(f"SVM expects {model.dim}-dim features, got {x.shape[0]}")
    value = float(model.decision_function(x[None, :])[0])
    return (1 if value >= 0.0 else -1), value


def dual_objective(alpha: np.ndarray, K: np.ndarray, y: np.ndarray) -> float:
    """Dual objective in maximisation form: sum(a) - 1/2 sum a_i a_j y_i y_j K_ij."""
    ay = np.asarray(alpha, dtype=np.float64) * np.asarray(y, dtype=np.float64)
    return float(np.sum(alpha) - 0.5 * ay @ K @ ay)


def kkt_residual(alpha: np.ndarray, K: np.ndarray, y: np.ndarray, C: float, bias: float) -> float:
    """Worst KKT violation over the training points."""
    alpha = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    margin = y * (K @ (alpha * y) + bias)
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~(at_zero | at_c)
    violation = np.zeros_like(margin)
    violation[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    violation[at_c] = np.maximum(0.0, margin[at_c] - 1.0)
    violation[free] = np.abs(margin[free] - 1.0)
    return float(violation.max()) if violation.size else 0.0


def svm_one_hot(labels: np.ndarray) -> np.ndarray:
    """Hard labels ({-1, +1} or {0, 1}) as (n, 2) one-hot probability rows."""
    positive = np.asarray(labels) > 0
    out = np.zeros((len(positive), 2), dtype=FP32)
    out[positive, 1] = 1.0
    out[~positive, 0] = 1.0
    return out


def attach_svm(checkpoint: Checkpoint, svm: KernelSvmModel) -> Checkpoint:
    """Store an SVM head inside a checkpoint as svm records."""
    records: Dict[str, np.ndarray] = {
        "svm/support_vectors": svm.support_vectors.astype(np.float64),
        "svm/dual_coef": svm.dual_coef.astype(np.float64),
    }
    if svm.scaler is not None:
        records["svm/scaler_mean"] = svm.scaler.mean.astype(np.float64)
        records["svm/scaler_scale"] = svm.scaler.scale.astype(np.float64)
    checkpoint.svm = records
    checkpoint.metadata["svm"] = {"bias": svm.bias, "gamma": svm.gamma, "C": svm.C}
    return checkpoint


def svm_from_checkpoint(checkpoint: Checkpoint) -> KernelSvmModel:
    if "svm/support_vectors" not in checkpoint.svm:
        raise ParameterError("Checkpoint holds no SVM records")
    settings = checkpoint.metadata.get("svm", {})
    scaler = None
    if "svm/scaler_mean" in checkpoint.svm:
        scaler = FeatureScaler()
        scaler.mean = checkpoint.svm["svm/scaler_mean"]
        scaler.scale = checkpoint.svm["svm/scaler_scale"]
    return KernelSvmModel(
        support_vectors=checkpoint.svm["svm/support_vectors"],
        dual_coef=checkpoint.svm["svm/dual_coef"],
        bias=float(settings.get("bias", 0.0)),
        gamma=float(settings.get("gamma", DEFAULT_GAMMA)),
        C=float(settings.get("C", DEFAULT_C)),
        scaler=scaler,
    )
