"""
Desk-scale synthetic cell images.

Each sample is a pale disc ("cell") on a light background; positive
samples carry a dark stained blob inside the disc. Task A and task B
share the blob-detection structure but differ in cell and stain
colours, which makes them a source/target pair for transfer learning.
"""
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..exceptions import ParameterError
from .preprocessing import save_patch
from .tensor_core import FP32, RngStream, rng_normal, rng_uniform

logger = logging.getLogger(__name__)

SYNTH_STREAM = 0x5E7

TASKS: Dict[str, Dict[str, Tuple[float, float, float]]] = {
    "A": {"background": (238.0, 232.0, 236.0), "cell": (214.0, 150.0, 170.0), "stain": (92.0, 36.0, 118.0)},
    "B": {"background": (230.0, 236.0, 238.0), "cell": (196.0, 168.0, 128.0), "stain": (40.0, 70.0, 140.0)},
}


def _draw_cell(stream: RngStream, size: int, positive: bool, palette: Dict[str, Tuple[float, float, float]]) -> np.ndarray:
    u = rng_uniform(stream.spawn(0), 0.0, 1.0, 8)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    centre_r = size / 2.0 + (u[0] - 0.5) * size * 0.15
    centre_c = size / 2.0 + (u[1] - 0.5) * size * 0.15
    radius = size * (0.33 + 0.08 * u[2])

    image = np.empty((size, size, 3))
    image[:] = palette["background"]
    inside = (rows - centre_r) ** 2 + (cols - centre_c) ** 2 <= radius ** 2
    tint = 1.0 + (u[3] - 0.5) * 0.1
    image[inside] = np.asarray(palette["cell"]) * tint

    if positive:
        # blob centre stays inside the disc
        angle = 2.0 * np.pi * u[4]
        offset = radius * 0.55 * u[5]
        blob_r = centre_r + offset * np.sin(angle)
        blob_c = centre_c + offset * np.cos(angle)
        sigma = size * (0.05 + 0.04 * u[6])
        weight = np.exp(-((rows - blob_r) ** 2 + (cols - blob_c) ** 2) / (2.0 * sigma ** 2))
        weight = (weight * (0.8 + 0.2 * u[7]))[..., None]
        image = image * (1.0 - weight) + np.asarray(palette["stain"]) * weight

    noise = rng_normal(stream.spawn(1), size * size * 3).reshape(size, size, 3) * 4.0
    return np.clip(image + noise, 0.0, 255.0)


def make_synthetic_blobs(
    n: int,
    size: int = 32,
    seed: int = 0,
    task: str = "A",
    positive_fraction: float = 0.5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generate a balanced two-class image set.

    Args:
        n: Number of images
        size: Square side in pixels
        seed: Generation seed (sample i uses its own derived stream)
        task: "A" or "B" colour scheme
        positive_fraction: Share of positive (parasitized) samples

    Returns:
        Tuple of (images (n, size, size, 3) float32 in 0..255, labels int64)
    """
    if task not in TASKS:
        raise ParameterError(f"Unknown synthetic task '{task}', expected one of {sorted(TASKS)}")
    if n < 1 or size < 8:
        raise ParameterError(f"Need n >= 1 and size >= 8, got n={n}, size={size}")
    root = RngStream(seed=seed, stream_id=SYNTH_STREAM).spawn(ord(task))
    if not 0.0 < positive_fraction < 1.0:
        raise ParameterError(f"positive_fraction must lie in (0, 1), got {positive_fraction}")
    # classes interleaved so any prefix is close to the requested balance
    steps = np.floor(np.arange(n + 1) * positive_fraction)
    labels = np.diff(steps).astype(np.int64)
    positives = int(labels.sum())
    images = np.stack([
        _draw_cell(root.spawn(i), size, bool(labels[i]), TASKS[task]) for i in range(n)
    ]).astype(FP32)
    logger.debug(f"Generated {n} synthetic task-{task} images at {size}x{size}, {positives} positive")
    return images, labels


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    n: int = 700,
    size: int = 32,
    seed: int = 0,
    task: str = "A",
    patients: int = 10,
) -> Path:
    """
    Write synthetic images in the two-folder layout the prepare step reads
    (Parasitized/ and Uninfected/), with patient-prefixed file names.
    """
    if patients < 1:
        raise ParameterError(f"patients must be >= 1, got {patients}")
    out_dir = Path(out_dir)
    images, labels = make_synthetic_blobs(n, size, seed, task)
    for index, (pixels, label) in enumerate(zip(images, labels)):
        patient = index % patients + 1
        folder = "Parasitized" if label == 1 else "Uninfected"
        name = f"C{patient}P{patient}thinF_IMG_synth_cell_{index:05d}.png"
        save_patch(out_dir / folder / name, pixels)
    logger.info(f"Wrote {n} synthetic task-{task} images for {patients} patients to {out_dir}")
    return out_dir
