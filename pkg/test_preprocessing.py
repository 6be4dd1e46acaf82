"""Tests for image IO, resampling, normalization and the Preprocessor."""
import numpy as np
import pytest

from app.exceptions import DegenerateStatisticsError, IngestionError, ParameterError, RangeError
from app.models.malaria_models import StandardizeStats
from app.services.augmentation import DatasetWhitener
from app.services.preprocessing import (
    Preprocessor,
    compute_stats,
    load_patch,
    mean_normalize,
    min_max_rescale,
    resample,
    save_patch,
    stain_normalize,
    stain_target_from,
    standardize,
)


def _patch(seed, centre=(150.0, 110.0, 160.0), spread=18.0, size=16):
    rng = np.random.default_rng(seed)
    return (np.asarray(centre) + rng.normal(0.0, spread, size=(size, size, 3))).astype(np.float32)


def test_min_max_rescale_anchor_values():
    out = min_max_rescale(np.array([0.0, 128.0, 255.0]))
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.50196, abs=1e-5)
    assert out[2] == 1.0


def test_min_max_rescale_rejects_out_of_range():
    with pytest.raises(RangeError):
        min_max_rescale(np.array([-1.0, 10.0]))


def test_self_standardization_is_zero_mean_unit_std():
    images = np.stack([_patch(i) for i in range(6)])
    out = standardize(images, compute_stats(images)).reshape(-1, 3).astype(np.float64)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-5)
    assert np.all(np.abs(out.std(axis=0) - 1.0) < 1e-5)


def test_standardize_rejects_zero_sigma():
    stats = StandardizeStats(mu=[0.0, 0.0, 0.0], sigma=[1.0, 0.0, 1.0])
    with pytest.raises(DegenerateStatisticsError):
        standardize(np.zeros((2, 2, 3)), stats)


def test_mean_normalize():
    stats = StandardizeStats(mu=[10.0, 20.0, 30.0], sigma=[1.0, 1.0, 1.0])
    out = mean_normalize(np.full((1, 1, 3), 40.0), stats)
    assert np.allclose(out[0, 0], [30 / 255, 20 / 255, 10 / 255])


def test_stain_normalization_aligns_channel_means():
    target = stain_target_from(_patch(0))
    a = stain_normalize(_patch(1, centre=(170.0, 90.0, 150.0)), target, clip=False)
    b = stain_normalize(_patch(2, centre=(130.0, 140.0, 190.0), spread=30.0), target, clip=False)
    a_mean = a.reshape(-1, 3).astype(np.float64).mean(axis=0)
    b_mean = b.reshape(-1, 3).astype(np.float64).mean(axis=0)
    assert np.all(np.abs(a_mean - b_mean) < 1e-3)


def test_stain_normalization_is_idempotent():
    target = stain_target_from(_patch(0))
    once = stain_normalize(_patch(3, centre=(160.0, 120.0, 150.0)), target)
    twice = stain_normalize(once, target)
    assert np.max(np.abs(twice - once)) < 1.0 / 255.0


def test_stain_normalization_rejects_flat_patches():
    target = stain_target_from(_patch(0))
    with pytest.raises(DegenerateStatisticsError):
        stain_normalize(np.full((4, 4, 3), 100.0), target)


def test_resample_keeps_corners_and_identity():
    pixels = _patch(4, size=10)
    up = resample(pixels, 20)
    assert up.shape == (20, 20, 3)
    for src, dst in (((0, 0), (0, 0)), ((0, -1), (0, -1)), ((-1, 0), (-1, 0)), ((-1, -1), (-1, -1))):
        assert np.allclose(up[dst], pixels[src], atol=1e-3)
    same = resample(pixels, 10)
    assert np.array_equal(same, pixels)
    assert same is not pixels


def test_patch_files_round_trip(tmp_path):
    pixels = np.clip(_patch(5), 0, 255)
    path = save_patch(tmp_path / "nested" / "cell.png", pixels)
    assert np.array_equal(load_patch(path), np.rint(pixels))


def test_unreadable_image_is_an_ingestion_error(tmp_path):
    bogus = tmp_path / "broken.png"
    bogus.write_bytes(b"not an image")
    with pytest.raises(IngestionError):
        load_patch(bogus)


def test_preprocessor_outputs_nchw():
    images = np.stack([_patch(i) for i in range(4)])
    prep = Preprocessor("rescale").fit(images)
    out = prep.transform(images)
    assert out.shape == (4, 3, 16, 16)
    assert out.dtype == np.float32
    assert np.allclose(out[0, 1], images[0, :, :, 1] / 255.0)


def test_preprocessor_uses_training_statistics_only():
    train = np.stack([_patch(i) for i in range(4)])
    other = np.stack([_patch(10 + i, centre=(60.0, 60.0, 60.0)) for i in range(2)])
    prep = Preprocessor("standardize").fit(train)
    assert prep.stats == compute_stats(train)
    out = prep.transform(other)
    assert np.all(out.mean(axis=(0, 2, 3)) < -1.0)


def test_preprocessor_with_stain_and_resample():
    images = [_patch(i, size=12) for i in range(3)]
    prep = Preprocessor("mean_normalize", stain_normalize=True, target_size=8).fit(images)
    assert prep.stain_target == stain_target_from(images[0])
    assert prep.transform(images).shape == (3, 3, 8, 8)
    assert prep.describe()["stain_normalize"] is True


def test_preprocessor_with_featurewise_whitening():
    images = np.stack([_patch(i) for i in range(4)])
    prep = Preprocessor("rescale", whitener=DatasetWhitener(featurewise=True)).fit(images)
    out = prep.transform(images).astype(np.float64)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-4


def test_preprocessor_validates_mode_and_fit():
    with pytest.raises(ParameterError):
        Preprocessor("whiten")
    with pytest.raises(ParameterError):
        Preprocessor("standardize").transform([_patch(0)])
