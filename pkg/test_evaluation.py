"""Tests for metrics, ensembles, test-time augmentation and patient diagnosis."""
import itertools

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import matthews_corrcoef, roc_auc_score

from app.exceptions import HarnessError, JoinError, MetricError, ParameterError
from app.models.malaria_models import AugmentPolicy, ConfusionMatrix, PredictionRecord
from app.services.evaluation import (
    basic_metrics,
    build_report,
    confusion,
    ensemble_predict,
    false_case_report,
    mcc,
    patient_diagnose,
    report_to_text,
    roc_auc_scores,
    tta_predict,
    weights_from_accuracy,
)
from app.services.preprocessing import Preprocessor
from app.services.tensor_core import RngStream


def _records(y, p, prefix="s"):
    return [PredictionRecord(sample_id=f"{prefix}{i}", y=int(a), p=float(b)) for i, (a, b) in enumerate(zip(y, p))]


def _brute_force_auc(y, scores):
    pos = [s for s, t in zip(scores, y) if t == 1]
    neg = [s for s, t in zip(scores, y) if t == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_reported_accuracy_anchor():
    # 2756 test cells with 34 false negatives and 29 false positives
    y = np.r_[np.ones(1378), np.zeros(1378)]
    p = np.r_[np.full(34, 0.2), np.full(1344, 0.9), np.full(29, 0.7), np.full(1349, 0.1)]
    report = build_report(_records(y, p))
    assert (report.confusion.fn, report.confusion.fp, report.n) == (34, 29, 2756)
    assert report.accuracy == pytest.approx(0.97714, abs=1e-5)


def test_threshold_is_inclusive():
    cm = confusion(_records([1, 0], [0.5, 0.4999]))
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (1, 0, 0, 1)


def test_basic_metrics_and_mcc_match_sklearn():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 300)
    p = np.clip(y * 0.3 + rng.uniform(0, 0.7, 300), 0, 1)
    cm = confusion(_records(y, p))
    metrics = basic_metrics(cm)
    predicted = (p >= 0.5).astype(int)
    assert metrics.accuracy == pytest.approx(np.mean(predicted == y))
    assert metrics.precision == pytest.approx(cm.tp / (cm.tp + cm.fp))
    assert metrics.recall == pytest.approx(cm.tp / (cm.tp + cm.fn))
    assert mcc(cm) == pytest.approx(matthews_corrcoef(y, predicted))


def test_degenerate_metrics_are_zero_and_flagged():
    metrics = basic_metrics(ConfusionMatrix(tp=0, fp=0, fn=3, tn=5))
    assert metrics.precision == 0.0
    assert metrics.f1 == 0.0
    assert set(metrics.degenerate) == {"precision", "f1"}
    assert mcc(ConfusionMatrix(tp=0, fp=0, fn=3, tn=5)) == 0.0


def test_empty_predictions_are_rejected():
    with pytest.raises(HarnessError):
        confusion([])


def test_auc_matches_sklearn_and_pair_counting():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 120)
    # coarse scores force many ties
    scores = np.round(y * 0.2 + rng.uniform(0, 1, 120), 1)
    auc = roc_auc_scores(y, scores)
    assert auc == pytest.approx(roc_auc_score(y, scores), abs=1e-12)
    assert auc == pytest.approx(_brute_force_auc(y, scores), abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(MetricError):
        roc_auc_scores(np.ones(4), np.linspace(0, 1, 4))
    assert build_report(_records([1, 1], [0.9, 0.2])).auc is None


def test_report_text_lists_confusion():
    text = report_to_text(build_report(_records([1, 0, 1], [0.9, 0.1, 0.3]), loss=0.4))
    assert "accuracy: 0.666667" in text
    assert "parasitized" in text and "uninfected" in text


def test_ensemble_of_identical_members_is_that_member():
    probs = np.random.default_rng(2).dirichlet([1.0, 1.0], size=30)
    combined, labels = ensemble_predict([probs, probs, probs])
    assert np.array_equal(combined, probs)
    assert np.array_equal(labels, probs.argmax(axis=1))


def test_one_hot_weights_select_a_member():
    rng = np.random.default_rng(3)
    members = [rng.dirichlet([1.0, 1.0], size=20) for _ in range(3)]
    combined, _ = ensemble_predict(members, weights=[1.0, 0.0, 0.0])
    assert np.array_equal(combined, members[0])
    combined, _ = ensemble_predict(members, weights=[0.0, 0.0, 2.0])
    assert np.allclose(combined, members[2], atol=1e-12)


def test_ensemble_weights_are_scale_invariant():
    rng = np.random.default_rng(4)
    members = [rng.dirichlet([1.0, 1.0], size=20) for _ in range(3)]
    a, _ = ensemble_predict(members, weights=[0.2, 0.3, 0.5])
    b, _ = ensemble_predict(members, weights=[2.0, 3.0, 5.0])
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a.sum(axis=1), 1.0)


def test_ensemble_validation():
    probs = np.full((3, 2), 0.5)
    with pytest.raises(ParameterError):
        ensemble_predict([probs])
    with pytest.raises(ParameterError):
        ensemble_predict([probs, np.full((4, 2), 0.5)])
    with pytest.raises(ParameterError):
        ensemble_predict([probs, probs], weights=[0.0, 0.0])
    assert np.allclose(weights_from_accuracy([0.9, 0.6]), [0.6, 0.4])


def test_identity_tta_equals_plain_prediction(tiny_custom):
    images = np.random.default_rng(5).integers(0, 256, size=(5, 32, 32, 3)).astype(np.float32)
    prep = Preprocessor("rescale").fit(images)
    plain = tiny_custom.predict_proba(prep.transform(images))
    averaged = tta_predict(tiny_custom, images, prep.transform, AugmentPolicy.identity(), RngStream(seed=0), k=3)
    assert np.array_equal(averaged, plain.astype(np.float64))
    with pytest.raises(ParameterError):
        tta_predict(tiny_custom, images, prep.transform, AugmentPolicy.identity(), RngStream(seed=0), k=0)


def test_patient_or_rule_matches_brute_force():
    rng = np.random.default_rng(6)
    records, patient_of = [], {}
    for patient in range(50):
        infected = rng.random() < 0.4
        for cell in range(int(rng.integers(1, 8))):
            sample_id = f"P{patient:02d}_{cell}"
            y = int(infected and rng.random() < 0.5)
            records.append(PredictionRecord(sample_id=sample_id, y=y, p=float(rng.random())))
            patient_of[sample_id] = f"P{patient:02d}"

    table, summary = patient_diagnose(records, patient_of)
    assert summary["n_patients"] == len(set(patient_of.values()))
    expected_correct = 0
    for patient in sorted(set(patient_of.values())):
        cells = [r for r in records if patient_of[r.sample_id] == patient]
        predicted = int(any(r.p >= 0.5 for r in cells))
        truth = int(any(r.y == 1 for r in cells))
        row = table.loc[table["patient_id"] == patient].iloc[0]
        assert (row["predicted"], row["truth"]) == (predicted, truth)
        expected_correct += predicted == truth
    assert summary["accuracy"] == pytest.approx(expected_correct / summary["n_patients"])


def test_patient_truth_map_overrides_cell_labels():
    records = _records([0, 0], [0.9, 0.1])
    table, summary = patient_diagnose(records, {"s0": "A", "s1": "B"}, patient_truth={"A": 1, "B": 0})
    assert table["truth"].tolist() == [1, 0]
    assert summary["accuracy"] == 1.0
    with pytest.raises(JoinError):
        patient_diagnose(records, {"s0": "A"})
    with pytest.raises(JoinError):
        patient_diagnose(records, {"s0": "A", "s1": "B"}, patient_truth={"A": 1})


def test_false_case_report_copies_images(tmp_path):
    sources = []
    for i in range(3):
        path = tmp_path / "src" / f"cell{i}.png"
        path.parent.mkdir(exist_ok=True)
        path.write_bytes(b"png")
        sources.append(str(path))
    records = _records([0, 1, 1], [0.8, 0.2, 0.9])
    written = false_case_report(records, {f"s{i}": p for i, p in enumerate(sources)}, tmp_path / "review")
    fp = pd.read_csv(written["false_positives"])
    fn = pd.read_csv(written["false_negatives"])
    assert fp["sample_id"].tolist() == ["s0"]
    assert fn["sample_id"].tolist() == ["s1"]
    assert (tmp_path / "review" / "false_positives" / "00000_cell0.png").exists()
    assert (tmp_path / "review" / "false_negatives" / "00000_cell1.png").exists()
    assert fp["copy"].tolist() == ["00000_cell0.png"]


def test_false_case_report_keeps_same_named_images(tmp_path):
    paths = {}
    for i, folder in enumerate(["Parasitized", "Uninfected"]):
        path = tmp_path / folder / "cell.png"
        path.parent.mkdir()
        path.write_bytes(folder.encode())
        paths[f"s{i}"] = str(path)
    records = _records([0, 0], [0.9, 0.7])
    written = false_case_report(records, paths, tmp_path / "review")
    copies = pd.read_csv(written["false_positives"])["copy"].tolist()
    assert copies == ["00000_cell.png", "00001_cell.png"]
    review = tmp_path / "review" / "false_positives"
    assert [(review / name).read_bytes() for name in copies] == [b"Parasitized", b"Uninfected"]
