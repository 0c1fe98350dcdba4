"""Seeded synthetic salt images: layered seismic-like texture with smooth low-contrast salt bodies."""
import logging
from typing import List

import numpy as np

from src.dataio.preparation import SampleRecord, make_record, normalise_depths

logger = logging.getLogger(__name__)

DEPTH_RANGE_FEET = (50, 960)


def _blob_mask(rng: np.random.Generator, resolution: int) -> np.ndarray:
    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    field = np.zeros((resolution, resolution))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        radius = rng.uniform(0.08, 0.35)
        amplitude = rng.uniform(0.6, 1.5)
        field += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    threshold = min(0.5, 0.9 * field.max())
    return (field > threshold).astype(np.uint8)


def _texture(rng: np.random.Generator, resolution: int, mask: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    texture = np.zeros((resolution, resolution))
    for _ in range(3):
        freq = rng.uniform(4.0, 14.0)
        warp = rng.uniform(0.0, 0.08) * np.sin(2 * np.pi * (rng.uniform(0.5, 2.0) * xx + rng.uniform()))
        texture += rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * freq * (yy + warp) + rng.uniform(0, 2 * np.pi))
    texture /= 3.0
    noise = rng.normal(0.0, 0.15, size=(resolution, resolution))
    salt = mask.astype(bool)
    if salt.any():
        perturbed = np.sin(2 * np.pi * rng.uniform(10.0, 20.0) * (yy + 0.3 * xx))
        texture[salt] = 0.3 * (0.5 * texture[salt] + 0.5 * perturbed[salt])
    return np.clip(0.5 + 0.3 * (texture + noise), 0.0, 1.0)


def generate_synthetic(n: int, resolution: int = 101, empty_fraction: float = 0.4,
                       seed: int = 0) -> List[SampleRecord]:
    """
    Generates a deterministic desk-scale corpus.

    Exactly floor(n * empty_fraction) samples have empty masks; sample i draws from a generator
    seeded with seed XOR i.

    Args:
        n (int): Number of samples.
        resolution (int): Image size.
        empty_fraction (float): Fraction of empty masks, in [0, 1).
        seed (int): Corpus seed.

    Returns:
        list[SampleRecord]: Records with depths normalised by the corpus maximum.

    Raises:
        ValueError: For n < 1, resolution < 8 or empty_fraction outside [0, 1).
    """
    if not 0.0 <= empty_fraction < 1.0:
        raise ValueError(f"empty_fraction must lie in [0, 1), got {empty_fraction}")
    if n < 1 or resolution < 8:
        raise ValueError(f"need n >= 1 and resolution >= 8, got n={n}, resolution={resolution}")
    n_empty = int(np.floor(n * empty_fraction))
    empty = set(np.random.default_rng(seed).permutation(n)[:n_empty].tolist())

    records = []
    for i in range(n):
        rng = np.random.default_rng(seed ^ i)
        if i in empty:
            mask = np.zeros((resolution, resolution), dtype=np.uint8)
        else:
            mask = _blob_mask(rng, resolution)
        image = _texture(rng, resolution, mask)
        depth_feet = float(rng.integers(*DEPTH_RANGE_FEET))
        records.append(make_record(f"synth_{seed}_{i:05d}", image, mask, 0.0, depth_feet))
    normalise_depths(records)
    logger.info(f"Generated {n} synthetic samples at {resolution}x{resolution} ({n_empty} empty)")
    return records
