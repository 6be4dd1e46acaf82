"""Tests for splits, cross-validation plans and experiment runs."""
import numpy as np
import pandas as pd
import pytest

from app.exceptions import HarnessError, ParameterError, PlanError, SplitError
from app.services import harness
from app.services.augmentation import augment_images
from app.services.checkpoint import load_checkpoint
from app.services.harness import (
    CheckpointPredictor,
    ExperimentData,
    _training_set,
    aggregate,
    carve_validation,
    derive_seed,
    ensemble_checkpoints,
    evaluate_checkpoint,
    freeze_sweep,
    kfold_plan,
    load_experiment_data,
    pivot_ablation,
    preprocessing_grid,
    run_ablation,
    run_cv,
    run_experiment,
    run_holdout,
    split_80_10_10,
    split_sizes,
    tta_checkpoint,
)
from app.models.malaria_models import AugmentPolicy
from app.services.manifest import Manifest
from app.services.preprocessing import Preprocessor, save_patch


def _manifest(n, positive=None, patients=None):
    positive = n // 2 if positive is None else positive
    labels = np.r_[np.ones(positive, dtype=np.int64), np.zeros(n - positive, dtype=np.int64)]
    return Manifest(pd.DataFrame({
        "path": [f"cell_{i}.png" for i in range(n)],
        "label": labels,
        "patient_id": patients if patients is not None else ["unknown"] * n,
    }))


def test_split_size_anchors():
    assert split_sizes(27_558) == (22_046, 2_756, 2_756)
    assert split_sizes(10) == (8, 1, 1)


def test_full_dataset_split_is_stratified_and_disjoint():
    manifest = _manifest(27_558)
    plan = split_80_10_10(manifest, seed=0)
    assert plan.sizes() == split_sizes(27_558)
    parts = [set(plan.train), set(plan.val), set(plan.test)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert len(parts[0] | parts[1] | parts[2]) == 27_558
    labels = manifest.labels
    for part in (plan.train, plan.val, plan.test):
        share = labels[part].mean()
        assert abs(share * len(part) - 0.5 * len(part)) <= 1.0


def test_split_is_seeded():
    manifest = _manifest(200, positive=70)
    assert split_80_10_10(manifest, seed=3) == split_80_10_10(manifest, seed=3)
    assert split_80_10_10(manifest, seed=3).train != split_80_10_10(manifest, seed=4).train


def test_smallest_split():
    plan = split_80_10_10(_manifest(10), seed=0)
    assert plan.sizes() == (8, 1, 1)


def test_split_rejects_tiny_inputs():
    with pytest.raises(SplitError):
        split_80_10_10(_manifest(9), seed=0)
    with pytest.raises(SplitError):
        split_80_10_10(_manifest(20, positive=2), seed=0)


def test_patient_disjoint_split():
    patients = [f"P{i // 5:02d}" for i in range(100)]
    manifest = _manifest(100, patients=patients)
    plan = split_80_10_10(manifest, seed=1, patient_disjoint=True)
    owners = [set(np.asarray(patients)[part]) for part in (plan.train, plan.val, plan.test)]
    assert not (owners[0] & owners[1] or owners[0] & owners[2] or owners[1] & owners[2])
    assert sum(plan.sizes()) == 100


def test_kfold_with_validation_fraction_matches_accounting():
    plan = kfold_plan(27_558, k=5, seed=0, validation_fraction=0.1)
    assert [len(v) for v in plan.validation] == [2_756] * 5
    assert [len(t) for t in plan.train] == [24_802] * 5
    blocks = [set(v) for v in plan.validation]
    assert sum(len(b) for b in blocks) == len(set().union(*blocks))


def test_kfold_partitions_the_pool():
    pool = list(range(100, 147))
    plan = kfold_plan(pool, k=5, seed=2)
    sizes = sorted(len(v) for v in plan.validation)
    assert sizes[-1] - sizes[0] <= 1
    assert sorted(i for v in plan.validation for i in v) == pool
    for train, held in zip(plan.train, plan.validation):
        assert not set(train) & set(held)
        assert len(train) + len(held) == 47


def test_kfold_rejects_bad_plans():
    with pytest.raises(PlanError):
        kfold_plan(10, k=1)
    with pytest.raises(PlanError):
        kfold_plan(3, k=5)
    with pytest.raises(PlanError):
        kfold_plan(10, k=5, validation_fraction=0.5)


def test_aggregate_uses_sample_std():
    report = aggregate([0.9, 0.95, 1.0])
    assert report.mean == pytest.approx(0.95)
    assert report.std == pytest.approx(0.05)
    assert aggregate([0.9]).std is None
    with pytest.raises(HarnessError):
        aggregate([])


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "fold", 1) == derive_seed(0, "fold", 1)
    assert len({derive_seed(0, "fold", i) for i in range(5)} | {derive_seed(0, "holdout", 0)}) == 6


def _plan(data, seed=0):
    return split_80_10_10(data.manifest, seed=seed)


def test_run_experiment_writes_artifacts(tmp_path, blob_data, desk_config):
    plan = _plan(blob_data)
    result = run_experiment(blob_data, plan.train, plan.val, plan.test, desk_config, tmp_path / "run")
    assert set(result.reports) == {"train", "val", "test"}
    assert len(result.test_predictions) == len(plan.test)
    assert len(result.log) == 2
    for name in ("model.ckpt", "report.txt", "metrics.csv", "predictions.csv", "accuracy.svg", "loss.svg", "training_log.csv"):
        assert (tmp_path / "run" / name).exists()
    assert result.reports["val"].accuracy == pytest.approx(result.checkpoint.metadata["val_acc"])


def test_saved_checkpoint_reproduces_test_metrics(tmp_path, blob_data, desk_config):
    plan = _plan(blob_data)
    result = run_experiment(blob_data, plan.train, plan.val, plan.test, desk_config, tmp_path)
    predictor = CheckpointPredictor.from_checkpoint(load_checkpoint(tmp_path / "model.ckpt"))
    test_data = ExperimentData(blob_data.manifest.subset(plan.test), blob_data.images[plan.test])
    report, records = evaluate_checkpoint(predictor, test_data)
    assert report.accuracy == pytest.approx(result.reports["test"].accuracy)
    assert [r.predicted for r in records] == [r.predicted for r in result.test_predictions]

    ensembled, _ = ensemble_checkpoints([predictor, predictor], test_data)
    assert ensembled.accuracy == pytest.approx(report.accuracy)
    identity, _ = tta_checkpoint(predictor, test_data, AugmentPolicy.identity(), k=2)
    assert identity.accuracy == pytest.approx(report.accuracy)


def test_run_experiment_with_svm_head(tmp_path, blob_data, desk_config):
    plan = _plan(blob_data)
    config = desk_config.model_copy(update={"head": "svm"})
    result = run_experiment(blob_data, plan.train, plan.val, plan.test, config, tmp_path)
    assert result.svm is not None
    assert result.reports["test"].loss is None
    predictor = CheckpointPredictor.from_checkpoint(load_checkpoint(tmp_path / "model.ckpt"))
    assert predictor.svm is not None
    with pytest.raises(ParameterError):
        tta_checkpoint(predictor, blob_data, AugmentPolicy.identity())


def test_run_experiment_with_augmentation_and_standardization(blob_data, desk_config):
    plan = _plan(blob_data)
    for augment in ("online", "offline"):
        config = desk_config.model_copy(update={
            "augment": augment, "augment_copies": 1, "preprocess": "standardize",
            "train": desk_config.train.model_copy(update={"epochs": 1}),
        })
        result = run_experiment(blob_data, plan.train, plan.val, plan.test, config)
        assert 0.0 <= result.reports["test"].accuracy <= 1.0
        assert result.preprocessor.stats is not None


def test_run_experiment_requires_rows(blob_data, desk_config):
    with pytest.raises(HarnessError):
        run_experiment(blob_data, [0, 1], [], [2], desk_config)


def test_run_cv_summarises_folds(tmp_path, blob_data, desk_config):
    config = desk_config.model_copy(update={"train": desk_config.train.model_copy(update={"epochs": 1})})
    result = run_cv(blob_data, config, k=2, seed=0, out_dir=tmp_path)
    assert len(result.reports) == 2
    assert result.table["fold"].tolist() == ["1", "2", "mean", "std"]
    assert result.summary["accuracy"].std is not None
    assert (tmp_path / "cv_summary.csv").exists()
    assert (tmp_path / "fold_2" / "model.ckpt").exists()


def test_run_cv_keeps_the_held_out_block_out_of_model_selection(monkeypatch, blob_data, desk_config):
    calls = []
    real = harness.run_experiment

    def recording(data, train_rows, val_rows, test_rows, config, out_dir=None):
        calls.append((set(train_rows), set(val_rows), set(test_rows)))
        return real(data, train_rows, val_rows, test_rows, config, out_dir)

    monkeypatch.setattr(harness, "run_experiment", recording)
    config = desk_config.model_copy(update={"train": desk_config.train.model_copy(update={"epochs": 1})})
    run_cv(blob_data, config, k=2, seed=0)
    plan = kfold_plan(len(blob_data), k=2, seed=0)
    assert len(calls) == 2
    for fold, (train, val, test) in enumerate(calls):
        assert test == set(plan.validation[fold])
        assert not val & test and not train & test and not train & val
        assert train | val == set(plan.train[fold])


def test_carve_validation_matches_fold_accounting():
    labels = np.r_[np.ones(13_779, dtype=np.int64), np.zeros(13_779, dtype=np.int64)]
    plan = kfold_plan(27_558, k=5, seed=0, validation_fraction=0.1)
    fit_rows, val_rows = carve_validation(plan.train[0], labels, seed=3)
    assert (len(fit_rows), len(val_rows)) == (22_046, 2_756)
    assert not set(fit_rows) & set(val_rows)
    assert abs(labels[val_rows].sum() - 2_756 * labels[plan.train[0]].mean()) <= 1.0
    assert carve_validation(plan.train[0], labels, seed=3) == (fit_rows, val_rows)
    with pytest.raises(PlanError):
        carve_validation([4], labels, seed=0)


def test_run_experiment_rejects_shared_validation_and_test_rows(blob_data, desk_config):
    with pytest.raises(HarnessError):
        run_experiment(blob_data, list(range(0, 80)), list(range(80, 100)), list(range(90, 120)), desk_config)


def test_online_epochs_replay_offline_variants(blob_data, desk_config):
    rows = np.arange(10, 40)
    prep = Preprocessor("rescale").fit(blob_data.images[rows])
    online = _training_set(blob_data, rows, desk_config.model_copy(update={"augment": "online"}), prep)
    offline = _training_set(
        blob_data, rows, desk_config.model_copy(update={"augment": "offline", "augment_copies": 2}), prep,
    )
    picked = np.array([3, 0, 17])
    x, y = online.batch(picked, epoch=2)
    expected = prep.transform(augment_images(blob_data.images[rows[picked]], rows[picked], desk_config.policy, desk_config.seed, variant=2))
    assert np.allclose(x, expected)
    assert np.allclose(x, offline.x[2 * len(rows) + picked])
    assert y.tolist() == blob_data.labels[rows[picked]].tolist()
    assert np.allclose(online.model_inputs(), prep.transform(blob_data.images[rows]))


def test_run_holdout_resplits_per_repeat(tmp_path, blob_data, desk_config):
    config = desk_config.model_copy(update={"train": desk_config.train.model_copy(update={"epochs": 1})})
    result = run_holdout(blob_data, config, repeats=2, seed=0, out_dir=tmp_path)
    assert result.table["repeat"].tolist() == ["1", "2", "mean", "std"]
    assert (tmp_path / "holdout_summary.csv").exists()
    assert (tmp_path / "repeat_2" / "model.ckpt").exists()
    with pytest.raises(HarnessError):
        run_holdout(blob_data, config, repeats=0)


def test_load_experiment_data_resamples_manifest_images(tmp_path, blobs):
    images, labels = blobs
    paths = [str(save_patch(tmp_path / f"cell_{i}.png", images[i])) for i in range(6)]
    manifest = Manifest(pd.DataFrame({"path": paths, "label": labels[:6], "patient_id": ["unknown"] * 6}))
    data = load_experiment_data(manifest, 16)
    assert data.images.shape == (6, 16, 16, 3)
    assert data.labels.tolist() == labels[:6].tolist()
    assert 0.0 <= data.images.min() and data.images.max() <= 255.0


def test_ablation_grid_and_pivot(blob_data, desk_config):
    config = desk_config.model_copy(update={"train": desk_config.train.model_copy(update={"epochs": 1})})
    cells = preprocessing_grid(config, models=("custom",), stain=(False, True))
    assert len(cells) == 2
    table = run_ablation(blob_data, cells, _plan(blob_data))
    assert len(table) == 2
    grid = pivot_ablation(table)
    assert grid.shape == (1, 2)
    assert {"train_accuracy", "val_loss", "test_accuracy", "mcc"} <= set(table.columns)


def test_freeze_sweep_cells(desk_config):
    cells = freeze_sweep(desk_config)
    assert [labels["freeze"] for labels, _ in cells] == ["all", "none", "L1-L8", "L1-L14", "L1-L16"]
    assert cells[2][1].freeze == "L1-L8"
    with pytest.raises(HarnessError):
        run_ablation(None, [], None)
