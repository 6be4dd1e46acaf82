"""
Evaluation: confusion matrix and metrics, ensemble and test-time
augmentation combiners, patient-level diagnosis and false-case export.

Positive class is parasitized (label 1); labels are assigned at p >= 0.5.
"""
import logging
import math
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import HarnessError, JoinError, MetricError, ParameterError
from ..models.malaria_models import BasicMetrics, ConfusionMatrix, MetricsReport, PredictionRecord
from .augmentation import augment_sample
from .networks import ModelGraph
from .tensor_core import RngStream

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
DEFAULT_TTA_COUNT = 5


def _arrays(preds: Sequence[PredictionRecord]) -> Tuple[np.ndarray, np.ndarray]:
    y = np.fromiter((r.y for r in preds), dtype=np.int64, count=len(preds))
    p = np.fromiter((r.p for r in preds), dtype=np.float64, count=len(preds))
    return y, p


def confusion(preds: Sequence[PredictionRecord]) -> ConfusionMatrix:
    if len(preds) == 0:
        raise HarnessError("Cannot build a confusion matrix from zero predictions")
    y, p = _arrays(preds)
    predicted = p >= THRESHOLD
    actual = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
        tn=int(np.sum(~predicted & ~actual)),
    )


def basic_metrics(cm: ConfusionMatrix) -> BasicMetrics:
    """
    Accuracy, precision, recall and F1.

    A zero denominator yields 0 and adds the metric name to `degenerate`.
    """
    if cm.n == 0:
        raise HarnessError("Confusion matrix is empty")
    degenerate: List[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(cm.tp, cm.tp + cm.fp, "precision")
    recall = ratio(cm.tp, cm.tp + cm.fn, "recall")
    if precision + recall == 0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return BasicMetrics(
        accuracy=(cm.tp + cm.tn) / cm.n,
        precision=precision,
        recall=recall,
        f1=f1,
        degenerate=degenerate,
    )


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    factors = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if factors == 0:
        return 0.0
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(factors)


def roc_auc_scores(y: np.ndarray, scores: np.ndarray) -> float:
    """
    Trapezoidal ROC area, thresholds placed between distinct scores.

    Tied scores move the curve diagonally, which counts tied
    positive/negative pairs as one half.
    """
    y = np.asarray(y)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC AUC needs both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = (y[order] == 1).astype(np.int64)
    # last index of each group of equal scores
    ends = np.flatnonzero(np.diff(sorted_scores) != 0)
    ends = np.append(ends, len(sorted_scores) - 1)
    tps = np.cumsum(sorted_pos)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0], tps]) / n_pos
    fpr = np.concatenate([[0], fps]) / n_neg
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(preds: Sequence[PredictionRecord]) -> float:
    y, p = _arrays(preds)
    return roc_auc_scores(y, p)


def build_report(preds: Sequence[PredictionRecord], loss: Optional[float] = None) -> MetricsReport:
    """All reported metrics for one prediction set; auc is None for single-class input."""
    cm = confusion(preds)
    basic = basic_metrics(cm)
    try:
        auc = roc_auc(preds)
    except MetricError:
        auc = None
    return MetricsReport(
        accuracy=basic.accuracy,
        precision=basic.precision,
        recall=basic.recall,
        f1=basic.f1,
        mcc=mcc(cm),
        auc=auc,
        loss=loss,
        n=cm.n,
        confusion=cm,
        degenerate=basic.degenerate,
    )


def report_to_text(report: MetricsReport) -> str:
    """Key/value rendering with the confusion matrix."""
    lines = []
    for key in ("n", "accuracy", "precision", "recall", "f1", "mcc", "auc", "loss"):
        value = getattr(report, key)
        if value is None:
            lines.append(f"{key}: n/a")
        elif isinstance(value, float):
            lines.append(f"{key}: {value:.6f}")
        else:
            lines.append(f"{key}: {value}")
    if report.degenerate:
        lines.append(f"degenerate: {','.join(report.degenerate)}")
    cm = report.confusion
    lines += [
        "confusion:",
        "                 pred_parasitized  pred_uninfected",
        f"  parasitized    {cm.tp:>16}  {cm.fn:>15}",
        f"  uninfected     {cm.fp:>16}  {cm.tn:>15}",
    ]
    return "\n".join(lines) + "\n"


def report_row(report: MetricsReport, **labels) -> Dict[str, object]:
    """Flat dict for one row of a comparison table."""
    row: Dict[str, object] = dict(labels)
    row.update({
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "mcc": report.mcc,
        "auc": report.auc,
        "loss": report.loss,
        "n": report.n,
        "tp": report.confusion.tp,
        "fp": report.confusion.fp,
        "fn": report.confusion.fn,
        "tn": report.confusion.tn,
    })
    return row


def _normalized_weights(weights: Optional[Sequence[float]], count: int) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ParameterError(f"Got {w.size} weights for {count} models")
    if np.any(w < 0) or not np.any(w > 0):
        raise ParameterError(f"Ensemble weights must be >= 0 and not all zero, got {w.tolist()}")
    return w / w.sum()


def ensemble_predict(
    member_probs: Sequence[np.ndarray],
    weights: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted mean of per-model (n, 2) probability matrices.

    Computed as p_0 + sum_k w_k (p_k - p_0), so identical members and
    one-hot weights reproduce a member exactly.

    Returns:
        Tuple of (combined (n, 2) probabilities, labels by argmax)
    """
    if len(member_probs) < 2:
        raise ParameterError(f"An ensemble needs at least 2 models, got {len(member_probs)}")
    members = [np.asarray(p, dtype=np.float64) for p in member_probs]
    shape = members[0].shape
    for index, member in enumerate(members):
        if member.shape != shape or member.ndim != 2 or member.shape[1] != 2:
            raise ParameterError(f"Model {index} output shape {member.shape} does not match {shape}")
    w = _normalized_weights(weights, len(members))
    base = members[0]
    combined = base.copy()
    for weight, member in zip(w, members):
        combined += weight * (member - base)
    return combined, combined.argmax(axis=1)


def weights_from_accuracy(accuracies: Sequence[float]) -> np.ndarray:
    """Ensemble weights proportional to each member's validation accuracy."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0 or np.any(acc < 0) or acc.sum() == 0:
        raise ParameterError(f"Cannot derive weights from accuracies {acc.tolist()}")
    return acc / acc.sum()


def tta_predict(
    model: ModelGraph,
    images: np.ndarray,
    prepare: Callable[[np.ndarray], np.ndarray],
    policy,
    stream: RngStream,
    k: int = DEFAULT_TTA_COUNT,
    batch_size: int = 64,
) -> np.ndarray:
    """
    Mean softmax output over each original image and k augmentations.

    Args:
        model: Trained network
        images: (N, H, W, 3) raw pixels
        prepare: Maps raw pixels to model input (the fitted preprocessor)
        policy: AugmentPolicy for the augmented copies
        stream: Root stream; image i, copy j uses stream.spawn(i).spawn(j)
        k: Number of augmented copies per image

    Returns:
        (N, 2) averaged probabilities
    """
    if k < 1:
        raise ParameterError(f"TTA needs k >= 1, got {k}")
    base = model.predict_proba(prepare(images), batch_size=batch_size).astype(np.float64)
    total = base.copy()
    for copy in range(1, k + 1):
        augmented = np.stack([
            augment_sample(image, policy, stream.spawn(index).spawn(copy))
            for index, image in enumerate(images)
        ])
        probs = model.predict_proba(prepare(augmented), batch_size=batch_size)
        total += (probs - base) / (k + 1)
    logger.debug(f"TTA over {len(images)} images with {k} augmentations each")
    return total


def patient_diagnose(
    preds: Sequence[PredictionRecord],
    patient_of: Dict[str, str],
    patient_truth: Optional[Dict[str, int]] = None,
) -> Tuple[pd.DataFrame, Dict[str, Optional[float]]]:
    """
    Patient-level diagnosis by the OR rule.

    A patient is positive iff any of their cells is predicted positive.
    Ground truth is the explicit `patient_truth` map when given, else the
    OR over the patient's true cell labels. Patient AUC scores each
    patient by their maximum cell probability.

    Returns:
        Tuple of (per-patient table, dict with accuracy, auc, n_patients)
    """
    rows: Dict[str, Dict[str, object]] = {}
    for record in preds:
        if record.sample_id not in patient_of:
            raise JoinError(f"Prediction for '{record.sample_id}' has no patient id")
        patient = patient_of[record.sample_id]
        row = rows.setdefault(patient, {"patient_id": patient, "cells": 0, "positive_cells": 0, "max_p": 0.0, "cell_truth": 0})
        row["cells"] += 1
        row["positive_cells"] += record.predicted
        row["max_p"] = max(row["max_p"], record.p)
        row["cell_truth"] = max(row["cell_truth"], record.y)

    table = pd.DataFrame(sorted(rows.values(), key=lambda r: r["patient_id"]))
    if table.empty:
        return table, {"accuracy": None, "auc": None, "n_patients": 0}
    table["predicted"] = (table["positive_cells"] > 0).astype(int)
    if patient_truth is not None:
        unknown = [p for p in table["patient_id"] if p not in patient_truth]
        if unknown:
            raise JoinError(f"No ground truth for patient(s) {unknown[:5]}")
        table["truth"] = [int(patient_truth[p]) for p in table["patient_id"]]
    else:
        table["truth"] = table["cell_truth"]
    table = table.drop(columns=["cell_truth"])

    accuracy = float(np.mean(table["predicted"] == table["truth"]))
    try:
        auc = roc_auc_scores(table["truth"].to_numpy(), table["max_p"].to_numpy())
    except MetricError:
        auc = None
    logger.info(f"Diagnosed {len(table)} patients: accuracy {accuracy:.4f}")
    return table, {"accuracy": accuracy, "auc": auc, "n_patients": len(table)}


def false_case_report(
    preds: Sequence[PredictionRecord],
    paths: Dict[str, str],
    out_dir: Union[str, Path],
) -> Dict[str, Path]:
    """
    List false positives and false negatives and copy their images for review.

    Args:
        preds: Evaluated predictions
        paths: sample_id -> source image path
        out_dir: Destination; images go to false_positives/ and false_negatives/

    Returns:
        Paths of the two listings
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = {
        "false_positives": [r for r in preds if r.predicted == 1 and r.y == 0],
        "false_negatives": [r for r in preds if r.predicted == 0 and r.y == 1],
    }
    written: Dict[str, Path] = {}
    unreadable = 0
    for name, records in groups.items():
        image_dir = out_dir / name
        image_dir.mkdir(exist_ok=True)
        rows = []
        # position prefix keeps same-named images from different folders apart
        for position, record in enumerate(records):
            if record.sample_id not in paths:
                raise JoinError(f"No source path for sample '{record.sample_id}'")
            source = Path(paths[record.sample_id])
            copy = image_dir / f"{position:05d}_{source.name}"
            rows.append({"sample_id": record.sample_id, "path": str(source), "copy": copy.name, "y": record.y, "p": record.p})
            try:
                shutil.copyfile(source, copy)
            except OSError as e:
                unreadable += 1
                logger.warning(f"Could not copy {source} for review: {e}")
        listing = out_dir / f"{name}.csv"
        pd.DataFrame(rows, columns=["sample_id", "path", "copy", "y", "p"]).to_csv(listing, index=False)
        written[name] = listing
    logger.info(
        f"False cases: {len(groups['false_positives'])} FP, {len(groups['false_negatives'])} FN "
        f"({unreadable} images not copied)"
    )
    return written
