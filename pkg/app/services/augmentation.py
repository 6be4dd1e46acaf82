"""
Training-set augmentation: parameter sampling inside policy ranges,
application of the sampled transforms, online and offline expansion of
the training set, and optional dataset whitening.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from matplotlib import colors
from scipy import ndimage

from ..exceptions import DegenerateStatisticsError, ParameterError
from ..models.malaria_models import AugmentParams, AugmentPolicy
from .manifest import Manifest
from .preprocessing import load_patch, resample, save_patch
from .tensor_core import FP32, RngStream, rng_normal, rng_permutation, rng_uniform

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 0xA06
TRANSFORMS = ["flip_lr", "flip_ud", "contrast", "crop", "rotate", "translate", "shear", "blur", "color", "noise"]
MID_GREY = 127.5
PARAM_KEY = 0
NOISE_KEY = 1


def _between(u: float, bounds) -> float:
    lo, hi = bounds
    return float(lo + (hi - lo) * u)


def sample_augment_params(policy: AugmentPolicy, stream: RngStream) -> AugmentParams:
    """
    Draw one concrete parameter set from a policy.

    Every continuous value falls inside its policy range; blur and color
    jitter are switched on with their own probabilities.
    """
    u = rng_uniform(stream, 0.0, 1.0, 17)
    order = list(TRANSFORMS)
    if policy.random_order:
        order = [TRANSFORMS[i] for i in rng_permutation(stream, len(TRANSFORMS))]
    blur_on = u[12] < policy.blur_p
    color_on = u[14] < policy.color_p
    return AugmentParams(
        flip_lr=bool(u[0] < policy.flip_lr_p),
        flip_ud=bool(u[1] < policy.flip_ud_p),
        contrast=_between(u[2], policy.contrast),
        crop=tuple(_between(value, policy.crop) for value in u[3:7]),
        rotate=_between(u[7], policy.rotate),
        translate_x=_between(u[8], policy.translate),
        translate_y=_between(u[9], policy.translate),
        shear=_between(u[10], policy.shear),
        noise_sigma=_between(u[11], policy.noise_sigma),
        blur_sigma=_between(u[13], policy.blur_sigma) if blur_on else None,
        hue_shift=_between(u[15], policy.hue_shift) if color_on else None,
        saturation=_between(u[16], policy.saturation) if color_on else None,
        order=order,
    )


def _warp(pixels: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    """Affine warp about the image centre; outside samples are black."""
    h, w = pixels.shape[:2]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre - np.asarray(shift)
    out = np.empty_like(pixels)
    for channel in range(pixels.shape[2]):
        out[..., channel] = ndimage.affine_transform(
            pixels[..., channel], matrix, offset=offset, order=1, mode="constant", cval=0.0
        )
    return out


def _rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    matrix = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    return _warp(pixels, matrix)


def _shear(pixels: np.ndarray, degrees: float) -> np.ndarray:
    matrix = np.array([[1.0, 0.0], [np.tan(np.deg2rad(degrees)), 1.0]])
    return _warp(pixels, matrix)


def _translate(pixels: np.ndarray, tx: float, ty: float) -> np.ndarray:
    h, w = pixels.shape[:2]
    return _warp(pixels, np.eye(2), shift=(ty * h, tx * w))


def _crop(pixels: np.ndarray, fractions) -> np.ndarray:
    h, w = pixels.shape[:2]
    top, bottom, left, right = fractions
    r0, r1 = int(round(top * h)), h - int(round(bottom * h))
    c0, c1 = int(round(left * w)), w - int(round(right * w))
    if r1 - r0 < 2 or c1 - c0 < 2:
        return pixels
    window = pixels[r0:r1, c0:c1]
    return ndimage.zoom(window, (h / window.shape[0], w / window.shape[1], 1.0), order=1, mode="nearest", grid_mode=False)


def _color(pixels: np.ndarray, hue_shift: float, saturation: float) -> np.ndarray:
    hsv = colors.rgb_to_hsv(np.clip(pixels, 0.0, 255.0) / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
    return colors.hsv_to_rgb(hsv) * 255.0


def apply_augment_params(pixels: np.ndarray, params: AugmentParams, stream: Optional[RngStream] = None) -> np.ndarray:
    """
    Apply sampled transforms in params.order to an (H, W, 3) patch.

    Transforms at their identity value are skipped, so identity params
    return the input pixels unchanged. Noise draws come from `stream`.
    """
    out = np.asarray(pixels, dtype=np.float64)
    for name in params.order or TRANSFORMS:
        if name == "flip_lr" and params.flip_lr:
            out = out[:, ::-1]
        elif name == "flip_ud" and params.flip_ud:
            out = out[::-1]
        elif name == "contrast" and params.contrast != 1.0:
            out = (out - MID_GREY) * params.contrast + MID_GREY
        elif name == "crop" and any(params.crop):
            out = _crop(out, params.crop)
        elif name == "rotate" and params.rotate != 0.0:
            out = _rotate(out, params.rotate)
        elif name == "translate" and (params.translate_x or params.translate_y):
            out = _translate(out, params.translate_x, params.translate_y)
        elif name == "shear" and params.shear != 0.0:
            out = _shear(out, params.shear)
        elif name == "blur" and params.blur_sigma:
            out = ndimage.gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0.0))
        elif name == "color" and params.hue_shift is not None:
            out = _color(out, params.hue_shift, params.saturation if params.saturation is not None else 1.0)
        elif name == "noise" and params.noise_sigma > 0.0:
            if stream is None:
                raise ParameterError("Gaussian noise needs a random stream")
            h, w = out.shape[:2]
            # one draw per pixel, shared by the three channels
            noise = rng_normal(stream, h * w).reshape(h, w, 1) * params.noise_sigma
            out = out + noise
    return np.clip(out, 0.0, 255.0).astype(FP32)


def augment_sample(pixels: np.ndarray, policy: AugmentPolicy, stream: RngStream) -> np.ndarray:
    """Sample parameters from `policy` and apply them; the label is untouched."""
    params = sample_augment_params(policy, stream.spawn(PARAM_KEY))
    return apply_augment_params(pixels, params, stream.spawn(NOISE_KEY))


def sample_stream(seed: int, row_index: int, variant: int) -> RngStream:
    """Stream of one augmented variant of one manifest row."""
    return RngStream(seed=seed, stream_id=AUGMENT_STREAM).spawn(row_index).spawn(variant)


def augment_images(
    images: np.ndarray,
    row_ids: Sequence[int],
    policy: AugmentPolicy,
    seed: int,
    variant: int = 0,
) -> np.ndarray:
    """
    Online augmentation of a batch: each image gets the stream of its
    (seed, row id, variant), so results do not depend on batch layout.
    """
    return np.stack([
        augment_sample(image, policy, sample_stream(seed, int(row), variant))
        for image, row in zip(images, row_ids)
    ])


def expand_training_set(manifest: Manifest, copies: int, policy: AugmentPolicy, seed: int) -> Manifest:
    """
    Offline expansion plan: each row is followed by `copies` augmented
    variants with derived stream ids.

    The returned manifest carries `source_row`, `variant` (0 = original)
    and `stream_id` columns; pixels are produced by materialize_augmented.
    """
    if copies < 1:
        raise ParameterError(f"copies must be >= 1, got {copies}")
    frame = manifest.frame
    repeated = frame.loc[frame.index.repeat(copies + 1)].reset_index(drop=True)
    source_rows = np.repeat(np.arange(len(frame)), copies + 1)
    variants = np.tile(np.arange(copies + 1), len(frame))
    repeated["source_row"] = source_rows
    repeated["variant"] = variants
    repeated["stream_id"] = [
        sample_stream(seed, int(row), int(variant)).stream_id if variant else 0
        for row, variant in zip(source_rows, variants)
    ]
    repeated["path"] = [
        path if variant == 0 else f"{path}#aug{variant}"
        for path, variant in zip(repeated["path"], variants)
    ]
    logger.info(f"Expanded {len(frame)} rows with {copies} copies each to {len(repeated)} rows")
    return Manifest(repeated)


def materialize_augmented(
    expanded: Manifest,
    cache_dir: Union[str, Path],
    policy: AugmentPolicy,
    seed: int,
    target_size: int = 200,
) -> Manifest:
    """
    Render the augmented rows of an expanded manifest into a cache
    directory and point their paths at the cached PNGs.
    """
    cache_dir = Path(cache_dir)
    frame = expanded.frame.copy()
    sources: Dict[int, np.ndarray] = {}
    new_paths: List[str] = []
    for path, row, variant in zip(frame["path"], frame["source_row"], frame["variant"]):
        source_path = path.split("#aug", 1)[0]
        if variant == 0:
            new_paths.append(source_path)
            continue
        if row not in sources:
            sources = {row: resample(load_patch(source_path), target_size)}
        pixels = augment_sample(sources[row], policy, sample_stream(seed, int(row), int(variant)))
        target = cache_dir / f"{Path(source_path).stem}_aug{variant}.png"
        save_patch(target, pixels)
        new_paths.append(str(target))
    frame["path"] = new_paths
    logger.info(f"Materialized {int((frame['variant'] > 0).sum())} augmented images in {cache_dir}")
    return Manifest(frame)


class DatasetWhitener:
    """
    Optional dataset-level whitening fitted on training images.

    featurewise: subtract the dataset mean and divide by the dataset std
    (scalar over all pixels). zca: ZCA-whiten flattened samples; the
    covariance is D x D in the flattened size, so it is only practical for
    small images.
    """

    def __init__(self, featurewise: bool = False, zca: bool = False, epsilon: float = 1e-6):
        self.featurewise = featurewise
        self.zca = zca
        self.epsilon = epsilon
        self.mean: Optional[float] = None
        self.std: Optional[float] = None
        self.principal: Optional[np.ndarray] = None
        self.zca_mean: Optional[np.ndarray] = None

    @classmethod
    def from_policy(cls, policy: AugmentPolicy) -> Optional["DatasetWhitener"]:
        if not (policy.featurewise_standardization or policy.zca_whitening):
            return None
        return cls(featurewise=policy.featurewise_standardization, zca=policy.zca_whitening)

    def fit(self, images: np.ndarray) -> "DatasetWhitener":
        x = np.asarray(images, dtype=np.float64)
        if self.featurewise:
            self.mean = float(x.mean())
            self.std = float(x.std())
            if self.std == 0.0:
                raise DegenerateStatisticsError("Training images have zero overall variance")
            x = (x - self.mean) / self.std
        if self.zca:
            flat = x.reshape(len(x), -1)
            self.zca_mean = flat.mean(axis=0)
            centred = flat - self.zca_mean
            sigma = centred.T @ centred / len(flat)
            u, s, _ = np.linalg.svd(sigma)
            self.principal = (u * (1.0 / np.sqrt(s + self.epsilon))) @ u.T
        return self

    def transform(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if self.featurewise:
            if self.mean is None:
                raise ParameterError("DatasetWhitener must be fitted before transform")
            x = (x - self.mean) / self.std
        if self.zca:
            if self.principal is None:
                raise ParameterError("DatasetWhitener must be fitted before transform")
            flat = (x.reshape(len(x), -1) - self.zca_mean) @ self.principal
            x = flat.reshape(x.shape)
        return x.astype(FP32)
