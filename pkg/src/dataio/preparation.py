"""Sample records, 5-channel input assembly and coverage-stratified folds."""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image

N_COVERAGE_BINS = 10
N_INPUT_CHANNELS = 5


@dataclass
class SampleRecord:
    """
    One labelled image.

    Attributes:
        id (str): Sample identifier.
        image (np.ndarray): [H, W] grayscale in [0, 1].
        mask (np.ndarray): [H, W] binary salt mask.
        depth (float): Depth normalised to [0, 1] by the corpus maximum.
        depth_feet (float): Raw depth as listed in depths.csv.
        coverage (float): Fraction of salt pixels.
        coverage_bin (int): min(floor(coverage * 10), 9).
        fold (int): Validation fold, -1 until a FoldPlan is applied.
    """
    id: str
    image: np.ndarray
    mask: np.ndarray
    depth: float
    depth_feet: float
    coverage: float
    coverage_bin: int
    fold: int = -1


def coverage_bin(coverage: float) -> int:
    return min(int(np.floor(coverage * N_COVERAGE_BINS)), N_COVERAGE_BINS - 1)


def make_record(sample_id: str, image: np.ndarray, mask: np.ndarray, depth: float,
                depth_feet: float) -> SampleRecord:
    """Builds a record, deriving coverage and its bin from the mask."""
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    coverage = float(mask.sum()) / mask.size
    return SampleRecord(sample_id, np.asarray(image, dtype=np.float64), mask, float(depth), float(depth_feet),
                        coverage, coverage_bin(coverage))


def normalise_depths(records: Sequence[SampleRecord]) -> None:
    """Rescales depth_feet by the corpus maximum into record.depth, in place."""
    top = max((r.depth_feet for r in records), default=0.0)
    for record in records:
        record.depth = record.depth_feet / top if top > 0 else 0.0


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """
    Bilinear resize of a 2D array to size x size through a 32-bit float Pillow image.

    Args:
        image (np.ndarray): [H, W] array.
        size (int): Output side length.

    Returns:
        np.ndarray: [size, size] float64 array.
    """
    if np.shape(image) == (size, size):
        return np.array(image, dtype=np.float64)
    resized = Image.fromarray(np.asarray(image, dtype=np.float32)).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask; the result is re-binarised to 0/1 uint8."""
    pixels = (np.asarray(mask) > 0).astype(np.uint8) * 255
    resized = Image.fromarray(pixels).resize((size, size), Image.Resampling.NEAREST)
    return (np.asarray(resized) > 0).astype(np.uint8)


def assemble_input(sample: SampleRecord, resolution: int) -> np.ndarray:
    """
    Builds the 5-channel input tensor.

    Channel 0 is the bilinearly resized grayscale, channel 1 the broadcast normalised depth,
    channel 2 the row coordinate y / (R - 1), channels 3 and 4 are zero padding.

    Args:
        sample (SampleRecord): Source sample.
        resolution (int): Output size R >= 8.

    Returns:
        np.ndarray: [5, R, R] float64 array.

    Raises:
        ValueError: If resolution is below 8.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    out = np.zeros((N_INPUT_CHANNELS, resolution, resolution))
    out[0] = np.clip(resize_bilinear(sample.image, resolution), 0.0, 1.0)
    out[1] = sample.depth
    out[2] = (np.arange(resolution) / (resolution - 1))[:, None]
    return out


def to_model_channels(inputs: np.ndarray, channels: int) -> np.ndarray:
    """Maps [..., 5, R, R] inputs to 1 (grayscale) or 3 (replicated grayscale) channels; 5 is unchanged."""
    if channels == N_INPUT_CHANNELS:
        return inputs
    if channels in (1, 3):
        gray = inputs[..., 0:1, :, :]
        return np.repeat(gray, channels, axis=-3)
    raise ValueError(f"unsupported channel count {channels}")


@dataclass
class FoldPlan:
    """
    Coverage-stratified K-fold assignment.

    Attributes:
        k (int): Number of folds.
        seed (int): Shuffle seed.
        assignments (dict[str, int]): Sample id to fold.
    """
    k: int
    seed: int
    assignments: Dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> List[str]:
        return [sample_id for sample_id, f in self.assignments.items() if f == fold]

    def apply(self, records: Sequence[SampleRecord]) -> None:
        for record in records:
            record.fold = self.assignments[record.id]


def stratified_folds(records: Sequence[SampleRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """
    Deals each coverage bin round-robin across folds after a seeded shuffle.

    The round-robin position carries over from one bin to the next, so total fold sizes also
    differ by at most one.

    Args:
        records (Sequence[SampleRecord]): Corpus.
        k (int): Number of folds, at least 2.
        seed (int): Shuffle seed.

    Returns:
        FoldPlan: Assignment of every record.

    Raises:
        ValueError: If k < 2.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    plan = FoldPlan(k=k, seed=seed)
    position = 0
    for bin_index in range(N_COVERAGE_BINS):
        ids = [r.id for r in records if r.coverage_bin == bin_index]
        if not ids:
            continue
        for sample_id in (ids[i] for i in rng.permutation(len(ids))):
            plan.assignments[sample_id] = position % k
            position += 1
    return plan
