"""
Loss, Adadelta optimisation, the epoch loop and best-validation model
selection.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..exceptions import HarnessError, ParameterError
from ..models.malaria_models import EpochRecord, PredictionRecord, TrainConfig
from .checkpoint import Checkpoint
from .layers import PROB_EPS
from .networks import ModelGraph
from .tensor_core import RngStream, Tensor, rng_permutation

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
SHUFFLE_KEY = 0

__all__ = [
    "AdadeltaState",
    "ArrayDataset",
    "adadelta_step",
    "bce_loss",
    "bce_with_softmax",
    "evaluate",
    "fit",
    "predict_dataset",
    "prediction_records",
    "train_epoch",
    "train_step",
]


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """
    Mean binary cross-entropy of positive-class probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_with_softmax(probs: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Loss of a (batch, 2) softmax output and its gradient w.r.t. the logits.

    Cross-entropy through a 2-way softmax differentiates to
    (probs - onehot(y)) / batch.
    """
    y = np.asarray(y, dtype=np.int64)
    loss = bce_loss(probs[:, 1], y)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(y)), y] = 1.0
    return loss, (probs - onehot) / len(y)


@dataclass
class AdadeltaState:
    """Decayed accumulators of squared gradients (eg2) and squared updates (edx2)."""
    eg2: Dict[str, np.ndarray]
    edx2: Dict[str, np.ndarray]
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0) -> "AdadeltaState":
        return cls(
            eg2={name: np.zeros_like(value) for name, value in params.items()},
            edx2={name: np.zeros_like(value) for name, value in params.items()},
            rho=rho, eps=eps, lr=lr,
        )

    @classmethod
    def from_config(cls, params: Dict[str, np.ndarray], config: TrainConfig) -> "AdadeltaState":
        return cls.for_params(params, rho=config.rho, eps=config.eps, lr=config.lr)


def adadelta_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdadeltaState,
    trainable: Optional[Dict[str, bool]] = None,
) -> Tuple[Dict[str, np.ndarray], AdadeltaState]:
    """
    One in-place Adadelta update of every trainable parameter.

    Per element: Eg2 <- rho Eg2 + (1-rho) g^2;
    delta = -sqrt(Edx2+eps)/sqrt(Eg2+eps) g; Edx2 <- rho Edx2 + (1-rho) delta^2;
    param <- param + lr delta.
    """
    rho, eps = state.rho, state.eps
    for name, param in params.items():
        if trainable is not None and not trainable.get(name, True):
            continue
        grad = grads.get(name)
        if grad is None:
            raise ParameterError(f"No gradient for parameter '{name}'")
        if grad.shape != param.shape or state.eg2[name].shape != param.shape:
            raise ParameterError(
                f"Shape mismatch for '{name}': param {param.shape}, grad {grad.shape}, state {state.eg2[name].shape}"
            )
        grad = grad.astype(param.dtype, copy=False)
        eg2 = state.eg2[name]
        edx2 = state.edx2[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * grad * grad
        delta = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * grad
        edx2 *= rho
        edx2 += (1.0 - rho) * delta * delta
        param += state.lr * delta
    return params, state


@dataclass
class ArrayDataset:
    """
    In-memory samples and labels.

    `transform(batch, indices, epoch)` maps stored samples to model input
    (online augmentation plus preprocessing); epoch is None outside
    training. Without it the stored samples are used as they are.
    """
    x: np.ndarray
    y: np.ndarray
    ids: Optional[np.ndarray] = None
    transform: Optional[Callable[[np.ndarray, np.ndarray, Optional[int]], np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, indices: np.ndarray, epoch: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        x = self.x[indices]
        if self.transform is not None:
            x = self.transform(x, indices, epoch)
        return x, self.y[indices]

    def model_inputs(self) -> np.ndarray:
        if self.transform is not None:
            return self.transform(self.x, np.arange(len(self)), None)
        return self.x


def train_step(
    model: ModelGraph,
    x: Tensor,
    y: np.ndarray,
    state: AdadeltaState,
    stream: Optional[RngStream] = None,
    dropout: bool = True,
) -> Tuple[float, np.ndarray]:
    """Forward, backward and one optimizer update on a single batch."""
    probs = model.forward(x, training=dropout, stream=stream)
    loss, d_logits = bce_with_softmax(probs, y)
    stop_at = model.first_trainable_layer()
    if stop_at < len(model.layers) - 1:
        model.backward(d_logits, wrt_logits=True, stop_at=stop_at)
        adadelta_step(model.params, model.grads(), state, model.trainable)
    return loss, probs


def train_epoch(
    model: ModelGraph,
    data: ArrayDataset,
    config: TrainConfig,
    stream: RngStream,
    state: Optional[AdadeltaState] = None,
    dropout: bool = True,
    epoch: int = 1,
) -> Dict[str, float]:
    """
    One pass over a seeded shuffle of the data in mini-batches.

    Args:
        model: Network to update in place
        data: Training samples
        config: Batch size and optimizer settings
        stream: Epoch stream; shuffles and dropout masks derive from it
        state: Optimizer state carried across epochs (fresh when None)
        dropout: Apply train-mode dropout
        epoch: 1-based epoch number handed to the dataset transform

    Returns:
        Dict with train_loss (sample-weighted mean) and train_acc
    """
    n = len(data)
    if n == 0:
        raise HarnessError("train_epoch needs at least one training sample")
    if state is None:
        state = AdadeltaState.from_config(model.params, config)

    order = rng_permutation(stream.spawn(SHUFFLE_KEY), n)
    model.train()
    total_loss = 0.0
    correct = 0
    for batch_index, start in enumerate(range(0, n, config.batch_size)):
        indices = order[start:start + config.batch_size]
        batch_stream = stream.spawn(batch_index + 1)
        x, y = data.batch(indices, epoch)
        loss, probs = train_step(model, x, y, state, batch_stream.spawn(1), dropout=dropout)
        total_loss += loss * len(indices)
        correct += int(np.sum((probs[:, 1] >= 0.5) == y))
        logger.debug(f"batch {batch_index}: loss {loss:.4f}")
    model.eval()
    return {"train_loss": total_loss / n, "train_acc": correct / n}


def prediction_records(probs: np.ndarray, y: np.ndarray, ids: Optional[np.ndarray] = None) -> List[PredictionRecord]:
    """One PredictionRecord per row of a (n, 2) probability matrix."""
    ids = ids if ids is not None else np.arange(len(y))
    return [
        PredictionRecord(sample_id=str(sample_id), y=int(label), p=float(np.clip(p, 0.0, 1.0)))
        for sample_id, label, p in zip(ids, y, probs[:, 1])
    ]


def predict_dataset(model: ModelGraph, data: ArrayDataset, batch_size: int = 64) -> np.ndarray:
    if len(data) == 0:
        raise HarnessError("Cannot predict on an empty dataset")
    return model.predict_proba(data.model_inputs(), batch_size=batch_size)


def evaluate(
    model: ModelGraph,
    data: ArrayDataset,
    batch_size: int = 64,
) -> Tuple[float, float, List[PredictionRecord]]:
    """
    Eval-mode loss, accuracy and per-sample prediction records.
    """
    probs = predict_dataset(model, data, batch_size)
    loss = bce_loss(probs[:, 1], data.y)
    accuracy = float(np.mean((probs[:, 1] >= 0.5) == data.y))
    return loss, accuracy, prediction_records(probs, data.y, data.ids)


def fit(
    model: ModelGraph,
    train: ArrayDataset,
    val: ArrayDataset,
    config: TrainConfig,
    dropout: bool = True,
) -> Tuple[Checkpoint, pd.DataFrame]:
    """
    Train for config.epochs epochs keeping the weights with the highest
    validation accuracy (earliest epoch on ties).

    Returns:
        Tuple of (best Checkpoint, per-epoch log DataFrame)
    """
    if train.ids is not None and val.ids is not None:
        overlap = set(map(str, train.ids)) & set(map(str, val.ids))
        if overlap:
            raise HarnessError(f"Train and validation sets share {len(overlap)} samples")

    state = AdadeltaState.from_config(model.params, config)
    root = RngStream(seed=config.shuffle_seed, stream_id=0)
    rows: List[EpochRecord] = []
    best: Optional[Checkpoint] = None

    for epoch in range(1, config.epochs + 1):
        epoch_stats = train_epoch(model, train, config, root.spawn(epoch), state, dropout=dropout, epoch=epoch)
        val_loss, val_acc, _ = evaluate(model, val, config.batch_size)
        record = EpochRecord(epoch=epoch, val_loss=val_loss, val_acc=val_acc, **epoch_stats)
        rows.append(record)
        logger.info(
            f"epoch {epoch}/{config.epochs}: loss {record.train_loss:.4f} acc {record.train_acc:.4f} "
            f"val_loss {val_loss:.4f} val_acc {val_acc:.4f}"
        )
        if best is None or val_acc > best.metadata["val_acc"]:
            best = Checkpoint.from_model(
                model, state,
                metadata={"epoch": epoch, "val_acc": float(val_acc), "val_loss": float(val_loss)},
            )

    log = pd.DataFrame([row.model_dump() for row in rows], columns=LOG_COLUMNS)
    logger.info(f"Best epoch {best.metadata['epoch']} with val_acc {best.metadata['val_acc']:.4f}")
    return best, log
