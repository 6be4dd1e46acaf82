"""
Image ingestion, resampling and the preprocessing transforms: min-max
rescaling, standardization, mean normalization and stain normalization.

Pixel arrays are (H, W, 3) in the 0..255 range until a Preprocessor turns
a batch into NCHW model input.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from ..exceptions import DegenerateStatisticsError, IngestionError, ParameterError, RangeError, ShapeError
from ..models.malaria_models import StandardizeStats
from .tensor_core import FP32

logger = logging.getLogger(__name__)

TARGET_SIZE = 200
PreprocessMode = Literal["rescale", "standardize", "mean_normalize"]

# orthonormal luminance/opponent basis: rows are l, a (yellow-blue), b (red-green)
_OPPONENT = np.array(
    [
        [1 / np.sqrt(3), 1 / np.sqrt(3), 1 / np.sqrt(3)],
        [1 / np.sqrt(6), 1 / np.sqrt(6), -2 / np.sqrt(6)],
        [1 / np.sqrt(2), -1 / np.sqrt(2), 0.0],
    ]
)


@dataclass
class ImagePatch:
    """One segmented cell image with its label and provenance."""
    pixels: np.ndarray
    label: int
    patient_id: str = "unknown"
    source_path: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"Patch {self.source_path or '<memory>'} must be HxWx3, got {self.pixels.shape}")


def load_patch(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit image file as float32 (H, W, 3) RGB."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("RGB"), dtype=FP32)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"Cannot read image {path}: {e}")
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ShapeError(f"Image {path} has a zero dimension")
    return pixels


def save_patch(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """Write (H, W, 3) pixels as a rounded 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    return path


def resample(pixels: np.ndarray, target: int = TARGET_SIZE) -> np.ndarray:
    """
    Bilinear resample to target x target.

    Sample grids are corner-aligned, so corner pixels of the output equal
    the corner pixels of the source.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"Expected (H, W, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    if h == 0 or w == 0:
        raise ShapeError(f"Cannot resample a patch with shape {pixels.shape}")
    if (h, w) == (target, target):
        return pixels.astype(FP32, copy=True)
    out = ndimage.zoom(
        pixels.astype(np.float64),
        (target / h, target / w, 1.0),
        order=1,
        mode="nearest",
        grid_mode=False,
    )
    return out.astype(FP32)


def min_max_rescale(x: np.ndarray) -> np.ndarray:
    """Map 0..255 values onto [0, 1]."""
    if x.size and (np.min(x) < 0 or np.max(x) > 255):
        raise RangeError(f"Pixel values must lie in [0, 255], got [{np.min(x)}, {np.max(x)}]")
    return (np.asarray(x, dtype=np.float64) / 255.0).astype(FP32)


def compute_stats(images: np.ndarray) -> StandardizeStats:
    """
    Per-channel mean and population standard deviation.

    Args:
        images: (N, H, W, 3) or (H, W, 3) pixels of the training split
    """
    channels = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    if channels.shape[0] == 0:
        raise DegenerateStatisticsError("Cannot compute statistics of an empty image set")
    return StandardizeStats(mu=channels.mean(axis=0).tolist(), sigma=channels.std(axis=0).tolist())


def _channel_stats(stats: StandardizeStats):
    mu = np.asarray(stats.mu, dtype=np.float64)
    sigma = np.asarray(stats.sigma, dtype=np.float64)
    if mu.shape != (3,) or sigma.shape != (3,):
        raise ParameterError(f"Expected 3-channel statistics, got mu {mu.shape}, sigma {sigma.shape}")
    return mu, sigma


def standardize(x: np.ndarray, stats: StandardizeStats) -> np.ndarray:
    """(x - mu) / sigma per channel, channels last."""
    mu, sigma = _channel_stats(stats)
    zero = np.flatnonzero(sigma == 0)
    if zero.size:
        raise DegenerateStatisticsError(f"Channel(s) {zero.tolist()} have zero standard deviation")
    return ((np.asarray(x, dtype=np.float64) - mu) / sigma).astype(FP32)


def mean_normalize(x: np.ndarray, stats: StandardizeStats) -> np.ndarray:
    """(x - mu) / 255 per channel, channels last."""
    mu, _ = _channel_stats(stats)
    return ((np.asarray(x, dtype=np.float64) - mu) / 255.0).astype(FP32)


def rgb_to_opponent(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) @ _OPPONENT.T


def opponent_to_rgb(opponent: np.ndarray) -> np.ndarray:
    return np.asarray(opponent, dtype=np.float64) @ _OPPONENT


def stain_target_from(template: np.ndarray) -> StandardizeStats:
    """Opponent-space channel statistics of a template patch."""
    opponent = rgb_to_opponent(template).reshape(-1, 3)
    return StandardizeStats(mu=opponent.mean(axis=0).tolist(), sigma=opponent.std(axis=0).tolist())


def stain_normalize(pixels: np.ndarray, target: StandardizeStats, clip: bool = True) -> np.ndarray:
    """
    Match the opponent-space channel statistics of a patch to a target.

    Each opponent channel is mapped linearly onto the target's mean and
    standard deviation, then the result goes back to RGB.

    Args:
        pixels: (H, W, 3) patch in the 0..255 range
        target: Opponent-space statistics from stain_target_from
        clip: Clip the RGB result to [0, 255]

    Returns:
        float32 (H, W, 3) patch
    """
    opponent = rgb_to_opponent(pixels)
    flat = opponent.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    zero = np.flatnonzero(std == 0)
    if zero.size:
        raise DegenerateStatisticsError(f"Opponent channel(s) {zero.tolist()} of the patch have zero variance")
    target_mu, target_sigma = _channel_stats(target)
    mapped = (opponent - mean) / std * target_sigma + target_mu
    rgb = opponent_to_rgb(mapped)
    if clip:
        rgb = np.clip(rgb, 0.0, 255.0)
    return rgb.astype(FP32)


def to_nchw(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) -> contiguous (N, 3, H, W) float32."""
    return np.ascontiguousarray(np.asarray(images, dtype=FP32).transpose(0, 3, 1, 2))


class Preprocessor:
    """
    Preprocessing fitted on the training split and applied to any split.

    Order: optional resample, optional stain normalization, then the mode
    transform (rescale, standardize or mean_normalize), then optional
    dataset whitening. Output is NCHW float32.
    """

    def __init__(
        self,
        mode: PreprocessMode = "rescale",
        stain_normalize: bool = False,
        stain_target: Optional[StandardizeStats] = None,
        target_size: Optional[int] = None,
        whitener=None,
    ):
        if mode not in ("rescale", "standardize", "mean_normalize"):
            raise ParameterError(f"Unknown preprocessing mode '{mode}'")
        self.mode = mode
        self.use_stain = stain_normalize
        self.stain_target = stain_target
        self.target_size = target_size
        self.whitener = whitener
        self.stats: Optional[StandardizeStats] = None

    def _base(self, images: Sequence[np.ndarray]) -> np.ndarray:
        out = []
        for pixels in images:
            if self.target_size is not None:
                pixels = resample(pixels, self.target_size)
            if self.use_stain:
                pixels = stain_normalize(pixels, self.stain_target)
            out.append(np.asarray(pixels, dtype=FP32))
        return np.stack(out) if out else np.zeros((0, 1, 1, 3), dtype=FP32)

    def fit(self, images: Sequence[np.ndarray]) -> "Preprocessor":
        """Compute statistics (and whitening) from training images only."""
        if self.use_stain and self.stain_target is None:
            if len(images) == 0:
                raise DegenerateStatisticsError("Cannot pick a stain template from an empty training set")
            self.stain_target = stain_target_from(images[0])
            logger.info("Stain target taken from the first training image")
        base = self._base(images)
        self.stats = compute_stats(base)
        logger.info(f"Fitted {self.mode} statistics: mu={np.round(self.stats.mu, 3).tolist()}")
        if self.whitener is not None:
            self.whitener.fit(self._mode_transform(base))
        return self

    def _mode_transform(self, base: np.ndarray) -> np.ndarray:
        if self.mode == "rescale":
            return min_max_rescale(base)
        if self.stats is None:
            raise ParameterError(f"Preprocessor in '{self.mode}' mode must be fitted first")
        if self.mode == "standardize":
            return standardize(base, self.stats)
        return mean_normalize(base, self.stats)

    def transform(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """(N, H, W, 3) pixels -> (N, 3, H, W) model input."""
        out = self._mode_transform(self._base(images))
        if self.whitener is not None:
            out = self.whitener.transform(out)
        return to_nchw(out)

    def describe(self) -> dict:
        return {
            "mode": self.mode,
            "stain_normalize": self.use_stain,
            "stats": self.stats.model_dump() if self.stats else None,
            "stain_target": self.stain_target.model_dump() if self.stain_target else None,
        }
