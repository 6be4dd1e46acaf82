"""
Experiment harness: stratified 80:10:10 splits, cross-validation plans,
single train/evaluate runs, repeated holdout, ablation grids and
aggregate reporting.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import HarnessError, ParameterError, PlanError, SplitError
from ..models.malaria_models import (
    AggregateReport,
    AugmentPolicy,
    CvPlan,
    ExperimentConfig,
    MetricsReport,
    PredictionRecord,
    SplitPlan,
    StandardizeStats,
)
from .augmentation import DatasetWhitener, augment_images
from .checkpoint import Checkpoint, load_checkpoint, restore_into, save_checkpoint
from .curves import emit_training_curves
from .evaluation import DEFAULT_TTA_COUNT, build_report, ensemble_predict, report_row, report_to_text, tta_predict
from .manifest import Manifest
from .networks import ModelGraph, build_model, set_trainable
from .preprocessing import Preprocessor, load_patch, resample
from .svm import (
    FeatureMatrix,
    KernelSvmModel,
    attach_svm,
    extract_features,
    smo_train,
    svm_from_checkpoint,
    svm_one_hot,
)
from .tensor_core import FP32, RngStream, rng_permutation
from .training import ArrayDataset, bce_loss, evaluate, fit, prediction_records

logger = logging.getLogger(__name__)

SPLIT_STREAM = 0x5B17
FOLD_STREAM = 0xF01D
SEED_STREAM = 0x5EED
TTA_STREAM = 0x77A
CARVE_KEY = 0xCA4E
# one ninth of a fold's training rows: 24,802 -> 22,046 fit + 2,756 validation
CV_VALIDATION_SHARE = 1.0 / 9.0


def derive_seed(seed: int, tag: str, index: int) -> int:
    """Deterministic child seed for fold / repeat `index` (63-bit)."""
    salt = sum(ord(ch) << (8 * i) for i, ch in enumerate(tag[:8]))
    return RngStream(seed=seed, stream_id=SEED_STREAM ^ salt).spawn(index).stream_id >> 1


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def split_sizes(n: int) -> Tuple[int, int, int]:
    """floor(0.8 n) train; the remainder halved, odd one to test."""
    train = (8 * n) // 10
    rest = n - train
    val = rest // 2
    return train, val, rest - val


def split_80_10_10(manifest: Manifest, seed: int, patient_disjoint: bool = False) -> SplitPlan:
    """
    Seeded 80:10:10 split, stratified by class.

    Per-class shares come from largest-remainder allocation of the global
    sizes, so each split's class counts are within one sample of the
    global proportion. With `patient_disjoint`, whole patients are
    assigned to splits instead (stratification is then approximate).
    """
    n = len(manifest)
    if n < 10:
        raise SplitError(f"Need at least 10 rows to split, got {n}")
    labels = manifest.labels
    classes, class_counts = np.unique(labels, return_counts=True)
    small = [int(c) for c, count in zip(classes, class_counts) if count < 3]
    if small:
        raise SplitError(f"Class(es) {small} have fewer than 3 rows")

    sizes = split_sizes(n)
    root = RngStream(seed=seed, stream_id=SPLIT_STREAM)
    if patient_disjoint:
        plan = _patient_split(manifest, sizes, root)
    else:
        train_c = _largest_remainder(sizes[0], class_counts.astype(np.float64))
        val_c = _largest_remainder(sizes[1], class_counts.astype(np.float64))
        train: List[int] = []
        val: List[int] = []
        test: List[int] = []
        for position, cls in enumerate(classes):
            members = np.flatnonzero(labels == cls)
            members = members[rng_permutation(root.spawn(int(cls)), len(members))]
            a, b = train_c[position], train_c[position] + val_c[position]
            train += members[:a].tolist()
            val += members[a:b].tolist()
            test += members[b:].tolist()
        plan = SplitPlan(seed=seed, train=sorted(train), val=sorted(val), test=sorted(test))
    _assert_partition([plan.train, plan.val, plan.test], n, "split")
    logger.info(f"Split {n} rows with seed {seed}: {plan.sizes()}")
    return plan


def _patient_split(manifest: Manifest, sizes: Tuple[int, int, int], root: RngStream) -> SplitPlan:
    patients = manifest.patients
    unique = np.unique(patients)
    order = unique[rng_permutation(root.spawn(0xBA7), len(unique))]
    groups = {p: np.flatnonzero(patients == p).tolist() for p in unique}
    buckets: List[List[int]] = [[], [], []]
    targets = [sizes[0], sizes[0] + sizes[1]]
    filled = 0
    for patient in order:
        bucket = 0 if filled < targets[0] else 1 if filled < targets[1] else 2
        buckets[bucket] += groups[patient]
        filled += len(groups[patient])
    if not all(buckets):
        raise SplitError(f"Only {len(unique)} patients; cannot form three patient-disjoint splits")
    return SplitPlan(seed=root.seed, train=sorted(buckets[0]), val=sorted(buckets[1]), test=sorted(buckets[2]))


def _assert_partition(parts: Sequence[Sequence[int]], n: int, what: str) -> None:
    seen = np.zeros(n, dtype=np.int64)
    for part in parts:
        np.add.at(seen, np.asarray(part, dtype=np.int64), 1)
    if np.any(seen > 1):
        raise SplitError(f"{what}: index {int(np.flatnonzero(seen > 1)[0])} appears in two sets")


def kfold_plan(
    pool: Union[int, Sequence[int]],
    k: int = 5,
    seed: int = 0,
    validation_fraction: Optional[float] = None,
) -> CvPlan:
    """
    Seeded k-fold plan over a pool of row indices.

    With validation_fraction None the shuffled pool is partitioned into k
    folds differing in size by at most one. With a fraction, each fold
    holds out a disjoint block of round(fraction * n) rows and trains on
    the rest of the pool.
    """
    indices = np.arange(pool) if isinstance(pool, (int, np.integer)) else np.asarray(pool, dtype=np.int64)
    n = len(indices)
    if k < 2:
        raise PlanError(f"k must be >= 2, got {k}")
    if k > n:
        raise PlanError(f"Cannot build {k} folds from {n} rows")
    shuffled = indices[rng_permutation(RngStream(seed=seed, stream_id=FOLD_STREAM), n)]

    if validation_fraction is None:
        blocks = np.array_split(shuffled, k)
    else:
        if not 0.0 < validation_fraction < 1.0:
            raise PlanError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
        held = int(math.floor(validation_fraction * n + 0.5))
        if held < 1 or held * k > n:
            raise PlanError(f"{k} disjoint blocks of {held} rows do not fit in {n} rows")
        blocks = [shuffled[i * held:(i + 1) * held] for i in range(k)]

    validation = [sorted(block.tolist()) for block in blocks]
    train = [sorted(np.setdiff1d(indices, block).tolist()) for block in blocks]
    _assert_partition(validation, int(indices.max()) + 1 if n else 0, "kfold")
    logger.info(f"{k}-fold plan over {n} rows: held-out sizes {[len(v) for v in validation]}")
    return CvPlan(seed=seed, k=k, validation=validation, train=train, validation_fraction=validation_fraction)


def carve_validation(
    rows: Sequence[int],
    labels: np.ndarray,
    seed: int,
    share: float = CV_VALIDATION_SHARE,
) -> Tuple[List[int], List[int]]:
    """
    Split a fold's training rows into fitting rows and a class-stratified
    validation slice used for best-epoch selection.

    Args:
        rows: Training row indices of the fold
        labels: Labels of every manifest row
        seed: Seed of the carving stream
        share: Fraction of `rows` moved to validation

    Returns:
        Tuple of (fit rows, validation rows), both sorted
    """
    rows = np.asarray(rows, dtype=np.int64)
    size = max(1, int(math.floor(share * len(rows) + 0.5)))
    if size >= len(rows):
        raise PlanError(f"Cannot carve {size} validation rows from {len(rows)} training rows")
    row_labels = np.asarray(labels)[rows]
    classes, counts = np.unique(row_labels, return_counts=True)
    quotas = _largest_remainder(size, counts.astype(np.float64))
    root = RngStream(seed=seed, stream_id=FOLD_STREAM).spawn(CARVE_KEY)
    val: List[int] = []
    for quota, cls in zip(quotas, classes):
        members = rows[row_labels == cls]
        members = members[rng_permutation(root.spawn(int(cls)), len(members))]
        val += members[:quota].tolist()
    fit_rows = np.setdiff1d(rows, val)
    return sorted(fit_rows.tolist()), sorted(val)


@dataclass
class ExperimentData:
    """Resampled raw pixels (N, H, W, 3) aligned with manifest rows."""
    manifest: Manifest
    images: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.manifest):
            raise HarnessError(f"{len(self.images)} images for {len(self.manifest)} manifest rows")

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    @property
    def ids(self) -> np.ndarray:
        return self.manifest.paths

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: np.ndarray, patients: Optional[Sequence[str]] = None) -> "ExperimentData":
        n = len(images)
        frame = pd.DataFrame({
            "path": [f"synthetic/{i:06d}.png" for i in range(n)],
            "label": np.asarray(labels, dtype=np.int64),
            "patient_id": list(patients) if patients is not None else ["unknown"] * n,
        })
        return cls(Manifest(frame), np.asarray(images, dtype=FP32))


def load_experiment_data(manifest: Manifest, input_size: int) -> ExperimentData:
    """Read every manifest image and resample it to input_size."""
    images = np.stack([resample(load_patch(path), input_size) for path in manifest.paths])
    logger.info(f"Loaded {len(images)} images at {input_size}x{input_size}")
    return ExperimentData(manifest, images)


@dataclass
class ExperimentResult:
    model: ModelGraph
    checkpoint: Checkpoint
    log: pd.DataFrame
    reports: Dict[str, MetricsReport]
    test_predictions: List[PredictionRecord]
    preprocessor: Preprocessor
    svm: Optional[KernelSvmModel] = None
    extras: Dict[str, object] = field(default_factory=dict)


def _training_set(data: ExperimentData, rows: np.ndarray, config: ExperimentConfig, prep: Preprocessor) -> ArrayDataset:
    images = data.images[rows]
    labels = data.labels[rows]
    ids = data.ids[rows]
    if config.augment == "offline":
        variants = [images]
        variant_ids = [ids]
        for variant in range(1, config.augment_copies + 1):
            variants.append(augment_images(images, rows, config.policy, config.seed, variant=variant))
            variant_ids.append(np.array([f"{i}#aug{variant}" for i in ids]))
        return ArrayDataset(
            prep.transform(np.concatenate(variants)),
            np.tile(labels, config.augment_copies + 1),
            np.concatenate(variant_ids),
        )
    if config.augment == "online":
        # epoch e of row r draws from the same stream as offline variant e of row r
        def transform(batch: np.ndarray, indices: np.ndarray, epoch: Optional[int]) -> np.ndarray:
            if epoch is None:
                return prep.transform(batch)
            return prep.transform(augment_images(batch, rows[indices], config.policy, config.seed, variant=epoch))

        return ArrayDataset(images, labels, ids, transform=transform)
    return ArrayDataset(prep.transform(images), labels, ids)


def _prepared(data: ExperimentData, rows: np.ndarray, prep: Preprocessor) -> ArrayDataset:
    return ArrayDataset(prep.transform(data.images[rows]), data.labels[rows], data.ids[rows])


def _svm_records(svm: KernelSvmModel, features: np.ndarray, dataset: ArrayDataset) -> List[PredictionRecord]:
    hard = svm.predict(features)
    return prediction_records(svm_one_hot(hard), dataset.y, dataset.ids)


def run_experiment(
    data: ExperimentData,
    train_rows: Sequence[int],
    val_rows: Sequence[int],
    test_rows: Sequence[int],
    config: ExperimentConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> ExperimentResult:
    """
    Fit preprocessing on the training rows, train with best-validation
    selection, then evaluate train/val/test (softmax or SVM head).
    """
    train_rows = np.asarray(train_rows, dtype=np.int64)
    val_rows = np.asarray(val_rows, dtype=np.int64)
    test_rows = np.asarray(test_rows, dtype=np.int64)
    if len(train_rows) == 0 or len(val_rows) == 0 or len(test_rows) == 0:
        raise HarnessError("Train, validation and test rows must all be non-empty")
    shared = np.intersect1d(val_rows, test_rows)
    if len(shared):
        raise HarnessError(f"Validation and test rows share {len(shared)} rows")

    prep = Preprocessor(
        mode=config.preprocess,
        stain_normalize=config.stain_normalize,
        whitener=DatasetWhitener.from_policy(config.policy),
    ).fit(data.images[train_rows])
    train_set = _training_set(data, train_rows, config, prep)
    val_set = _prepared(data, val_rows, prep)
    test_set = _prepared(data, test_rows, prep)

    model = build_model(config.model, config.input_size, seed=config.seed, width_divisor=config.width_divisor)
    if config.pretrained:
        restore_into(model, load_checkpoint(config.pretrained))
        logger.info(f"Initialised {model.name} from {config.pretrained}")
    set_trainable(model, config.freeze)

    best, log = fit(model, train_set, val_set, config.train, dropout=config.dropout)
    restore_into(model, best)
    best.metadata["preprocess"] = describe_preprocessor(prep)
    best.metadata["experiment"] = config.model_dump(mode="json")

    plain_train = _prepared(data, train_rows, prep)
    reports: Dict[str, MetricsReport] = {}
    predictions: Dict[str, List[PredictionRecord]] = {}
    for name, dataset in (("train", plain_train), ("val", val_set), ("test", test_set)):
        loss, _, records = evaluate(model, dataset, config.train.batch_size)
        reports[name] = build_report(records, loss)
        predictions[name] = records

    svm = None
    if config.head == "svm":
        train_features = extract_features(model, plain_train.x, batch_size=config.train.batch_size)
        svm = smo_train(
            FeatureMatrix.from_binary(train_features, plain_train.y),
            C=config.svm_c, gamma=config.svm_gamma, tol=config.svm_tol, scale=True,
        )
        attach_svm(best, svm)
        for name, dataset in (("train", plain_train), ("val", val_set), ("test", test_set)):
            features = train_features if name == "train" else extract_features(model, dataset.x, batch_size=config.train.batch_size)
            records = _svm_records(svm, features, dataset)
            reports[name] = build_report(records)
            predictions[name] = records

    result = ExperimentResult(
        model=model, checkpoint=best, log=log, reports=reports,
        test_predictions=predictions["test"], preprocessor=prep, svm=svm,
    )
    if out_dir is not None:
        write_experiment(result, out_dir)
    logger.info(
        f"{config.model}/{config.head}: test accuracy {reports['test'].accuracy:.4f} "
        f"(best epoch {best.metadata.get('epoch')})"
    )
    return result


def write_experiment(result: ExperimentResult, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt", result.checkpoint)
    emit_training_curves(result.log, out_dir)
    (out_dir / "report.txt").write_text(report_to_text(result.reports["test"]))
    table = pd.DataFrame([report_row(report, split=name) for name, report in result.reports.items()])
    write_table(table, out_dir / "metrics.csv")
    write_table(pd.DataFrame([r.model_dump() for r in result.test_predictions]), out_dir / "predictions.csv", float_format=None)
    return out_dir


def write_table(table: pd.DataFrame, path: Union[str, Path], float_format: Optional[str] = "%.6f") -> Path:
    """CSV without the index; predictions pass float_format=None to keep full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=float_format)
    return path


def aggregate(values: Sequence[float], metric: str = "accuracy") -> AggregateReport:
    """Mean and sample standard deviation (None for a single value)."""
    values = [float(v) for v in values]
    if not values:
        raise HarnessError(f"No values to aggregate for {metric}")
    n = len(values)
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else None
    return AggregateReport(metric=metric, values=values, mean=mean, std=std)


def _summary_table(rows: List[Dict[str, object]], key: str) -> Tuple[pd.DataFrame, Dict[str, AggregateReport]]:
    table = pd.DataFrame(rows)
    metrics = ["accuracy", "precision", "recall", "f1", "mcc", "auc"]
    summary = {
        metric: aggregate([v for v in table[metric] if v is not None and not pd.isna(v)], metric)
        for metric in metrics
        if table[metric].notna().any()
    }
    mean_row = {key: "mean", **{m: summary[m].mean for m in summary}}
    std_row = {key: "std", **{m: summary[m].std for m in summary}}
    return pd.concat([table, pd.DataFrame([mean_row, std_row])], ignore_index=True), summary


@dataclass
class RepeatedRunResult:
    reports: List[MetricsReport]
    summary: Dict[str, AggregateReport]
    table: pd.DataFrame


def run_cv(
    data: ExperimentData,
    config: ExperimentConfig,
    k: int = 5,
    seed: int = 0,
    pool: Optional[Sequence[int]] = None,
    validation_fraction: Optional[float] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RepeatedRunResult:
    """
    k-fold cross-validation: one freshly initialised model per fold,
    evaluated on its held-out block; mean and sample std over folds.

    Best-epoch selection uses a validation slice carved from the fold's
    training rows, never the held-out block.
    """
    plan = kfold_plan(pool if pool is not None else len(data), k, seed, validation_fraction)
    reports: List[MetricsReport] = []
    rows: List[Dict[str, object]] = []
    for fold in range(plan.k):
        fold_seed = derive_seed(seed, "fold", fold)
        fold_config = config.model_copy(update={
            "seed": fold_seed,
            "train": config.train.model_copy(update={"shuffle_seed": fold_seed}),
        })
        fold_dir = Path(out_dir) / f"fold_{fold + 1}" if out_dir is not None else None
        held = plan.validation[fold]
        fit_rows, val_rows = carve_validation(plan.train[fold], data.labels, fold_seed)
        result = run_experiment(data, fit_rows, val_rows, held, fold_config, fold_dir)
        reports.append(result.reports["test"])
        rows.append(report_row(result.reports["test"], fold=str(fold + 1)))
        logger.info(f"Fold {fold + 1}/{plan.k}: accuracy {result.reports['test'].accuracy:.4f}")
    table, summary = _summary_table(rows, "fold")
    if out_dir is not None:
        write_table(table, Path(out_dir) / "cv_summary.csv")
    acc = summary["accuracy"]
    logger.info(f"CV accuracy {acc.mean:.4f} +- {acc.std if acc.std is not None else float('nan'):.4f}")
    return RepeatedRunResult(reports, summary, table)


def run_holdout(
    data: ExperimentData,
    config: ExperimentConfig,
    repeats: int = 5,
    seed: int = 0,
    patient_disjoint: bool = False,
    out_dir: Optional[Union[str, Path]] = None,
) -> RepeatedRunResult:
    """Repeated seeded 80:10:10 resplits, each trained and tested."""
    if repeats < 1:
        raise HarnessError(f"repeats must be >= 1, got {repeats}")
    reports: List[MetricsReport] = []
    rows: List[Dict[str, object]] = []
    for repeat in range(repeats):
        repeat_seed = derive_seed(seed, "holdout", repeat)
        plan = split_80_10_10(data.manifest, repeat_seed, patient_disjoint)
        repeat_config = config.model_copy(update={
            "seed": repeat_seed,
            "train": config.train.model_copy(update={"shuffle_seed": repeat_seed}),
        })
        repeat_dir = Path(out_dir) / f"repeat_{repeat + 1}" if out_dir is not None else None
        result = run_experiment(data, plan.train, plan.val, plan.test, repeat_config, repeat_dir)
        reports.append(result.reports["test"])
        rows.append(report_row(result.reports["test"], repeat=str(repeat + 1)))
    table, summary = _summary_table(rows, "repeat")
    if out_dir is not None:
        write_table(table, Path(out_dir) / "holdout_summary.csv")
    return RepeatedRunResult(reports, summary, table)


def freeze_sweep(base: ExperimentConfig, ranges: Sequence[str] = ("all", "none", "L1-L8", "L1-L14", "L1-L16")):
    """Ablation cells for a frozen-stage sweep."""
    return [({"model": base.model, "freeze": r}, base.model_copy(update={"freeze": r})) for r in ranges]


def preprocessing_grid(
    base: ExperimentConfig,
    models: Sequence[str] = ("custom", "vgg-baseline"),
    stain: Sequence[bool] = (False, True),
    modes: Sequence[str] = ("rescale",),
    heads: Sequence[str] = ("softmax",),
):
    """Ablation cells for {model x head} x {stain} x {preprocessing mode}."""
    cells = []
    for model in models:
        for head in heads:
            for stain_flag in stain:
                for mode in modes:
                    labels = {"model": model, "head": head, "stain_normalize": stain_flag, "preprocess": mode}
                    config = base.model_copy(update={
                        "model": model, "head": head, "stain_normalize": stain_flag, "preprocess": mode,
                    })
                    cells.append((labels, config))
    return cells


def run_ablation(
    data: ExperimentData,
    cells: Sequence[Tuple[Dict[str, object], ExperimentConfig]],
    plan: SplitPlan,
    out_dir: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """
    One row per (labels, config) cell: train/val/test accuracy and loss
    plus the test-set metrics.
    """
    if not cells:
        raise HarnessError("Ablation matrix is empty")
    rows = []
    for index, (labels, config) in enumerate(cells):
        cell_dir = Path(out_dir) / f"cell_{index + 1}" if out_dir is not None else None
        result = run_experiment(data, plan.train, plan.val, plan.test, config, cell_dir)
        row: Dict[str, object] = dict(labels)
        for split in ("train", "val", "test"):
            row[f"{split}_accuracy"] = result.reports[split].accuracy
            row[f"{split}_loss"] = result.reports[split].loss
        test = result.reports["test"]
        row.update({"precision": test.precision, "recall": test.recall, "f1": test.f1, "mcc": test.mcc, "auc": test.auc})
        rows.append(row)
        logger.info(f"Ablation cell {index + 1}/{len(cells)} {labels}: test accuracy {test.accuracy:.4f}")
    table = pd.DataFrame(rows)
    if out_dir is not None:
        write_table(table, Path(out_dir) / "ablation.csv")
    return table


def pivot_ablation(table: pd.DataFrame, index: Union[str, List[str]] = "model", columns: str = "stain_normalize", values: str = "test_accuracy") -> pd.DataFrame:
    """Grid view of an ablation table, e.g. model x stain normalization."""
    if table.empty:
        raise HarnessError("Cannot pivot an empty ablation table")
    return table.pivot_table(index=index, columns=columns, values=values, aggfunc="first")


def describe_preprocessor(prep: Preprocessor) -> Dict[str, object]:
    """JSON-ready description of a fitted Preprocessor for checkpoint metadata."""
    description = prep.describe()
    whitener = prep.whitener
    description["whitener"] = None if whitener is None else {
        "featurewise": whitener.featurewise, "zca": whitener.zca, "mean": whitener.mean, "std": whitener.std,
    }
    return description


def preprocessor_from_checkpoint(checkpoint: Checkpoint) -> Preprocessor:
    """Rebuild the training-split Preprocessor stored with a checkpoint."""
    description = checkpoint.metadata.get("preprocess")
    if description is None:
        raise ParameterError("Checkpoint carries no preprocessing description")
    prep = Preprocessor(
        mode=description["mode"],
        stain_normalize=description["stain_normalize"],
        stain_target=StandardizeStats(**description["stain_target"]) if description.get("stain_target") else None,
    )
    if description.get("stats"):
        prep.stats = StandardizeStats(**description["stats"])
    whitening = description.get("whitener")
    if whitening:
        if whitening["zca"]:
            raise ParameterError("ZCA whitening matrices are not stored in checkpoints; re-run training to evaluate")
        whitener = DatasetWhitener(featurewise=True)
        whitener.mean, whitener.std = whitening["mean"], whitening["std"]
        prep.whitener = whitener
    return prep


@dataclass
class CheckpointPredictor:
    """A trained model with its preprocessing and optional SVM head."""
    checkpoint: Checkpoint
    model: ModelGraph
    preprocessor: Preprocessor
    svm: Optional[KernelSvmModel] = None

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "CheckpointPredictor":
        svm = svm_from_checkpoint(checkpoint) if checkpoint.svm else None
        return cls(checkpoint, checkpoint.to_model(), preprocessor_from_checkpoint(checkpoint), svm)

    @property
    def input_size(self) -> int:
        return self.model.input_shape[-1]

    @property
    def val_accuracy(self) -> Optional[float]:
        return self.checkpoint.metadata.get("val_acc")

    def prepare(self, images: np.ndarray) -> np.ndarray:
        return self.preprocessor.transform(images)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """(n, 2) probabilities; one-hot rows for an SVM head."""
        x = self.prepare(images)
        if self.svm is not None:
            return svm_one_hot(self.svm.predict(extract_features(self.model, x, batch_size=batch_size)))
        return self.model.predict_proba(x, batch_size=batch_size)


def _report(probs: np.ndarray, data: ExperimentData, with_loss: bool = True) -> Tuple[MetricsReport, List[PredictionRecord]]:
    records = prediction_records(probs, data.labels, data.ids)
    loss = bce_loss(probs[:, 1], data.labels) if with_loss else None
    return build_report(records, loss), records


def evaluate_checkpoint(
    predictor: CheckpointPredictor,
    data: ExperimentData,
    batch_size: int = 64,
) -> Tuple[MetricsReport, List[PredictionRecord]]:
    """Metrics report and prediction records of a saved model on new data."""
    probs = predictor.predict(data.images, batch_size)
    return _report(probs, data, with_loss=predictor.svm is None)


def ensemble_checkpoints(
    predictors: Sequence[CheckpointPredictor],
    data: ExperimentData,
    weights: Optional[Sequence[float]] = None,
    batch_size: int = 64,
) -> Tuple[MetricsReport, List[PredictionRecord]]:
    """Weighted ensemble of saved models; 'None' weights average uniformly."""
    combined, _ = ensemble_predict([p.predict(data.images, batch_size) for p in predictors], weights)
    return _report(combined, data)


def tta_checkpoint(
    predictor: CheckpointPredictor,
    data: ExperimentData,
    policy: AugmentPolicy,
    seed: int = 0,
    k: int = DEFAULT_TTA_COUNT,
    batch_size: int = 64,
) -> Tuple[MetricsReport, List[PredictionRecord]]:
    """Test-time augmentation of a saved softmax model."""
    if predictor.svm is not None:
        raise ParameterError("Test-time augmentation averages softmax outputs; the checkpoint has an SVM head")
    probs = tta_predict(
        predictor.model, data.images, predictor.prepare, policy,
        RngStream(seed=seed, stream_id=TTA_STREAM), k=k, batch_size=batch_size,
    )
    return _report(probs, data)
