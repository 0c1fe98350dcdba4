"""IoU, the competition mean-precision metric, threshold search and flip test-time augmentation."""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from src import tensorgraph as tg
from src.errors import ShapeError

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))
SEARCH_THRESHOLDS = tuple(round(0.30 + 0.01 * k, 2) for k in range(41))


@dataclass
class EvalResult:
    """
    Out-of-fold evaluation at the selected threshold.

    Attributes:
        tgs_map (float): Mean per-image precision.
        best_threshold (float): Binarisation cutoff in [0.30, 0.70].
        per_image (list[tuple[str, float, float]]): (id, iou, tgs_precision) rows.
        n_empty_correct (int): Images with empty ground truth predicted empty.
    """
    tgs_map: float
    best_threshold: float
    per_image: List[Tuple[str, float, float]] = field(default_factory=list)
    n_empty_correct: int = 0

    def summary(self) -> dict:
        return {"tgs_map": self.tgs_map, "best_threshold": self.best_threshold,
                "n_images": len(self.per_image), "n_empty_correct": self.n_empty_correct}


def _pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Casts prediction and ground truth to boolean masks of equal shape."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|, and 1.0 when both are empty."""
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def tgs_precision(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Per-image competition precision.

    Empty ground truth scores 1.0 only for an empty prediction; otherwise the score is the
    fraction of thresholds 0.50, 0.55, ..., 0.95 strictly exceeded by the IoU.
    """
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return 0.0 if pred.any() else 1.0
    if not pred.any():
        return 0.0
    score = iou(pred, gt)
    return sum(1 for t in IOU_THRESHOLDS if score > t) / len(IOU_THRESHOLDS)


def mean_tgs_precision(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray], threshold: float) -> float:
    return float(np.mean([tgs_precision(np.asarray(p) > threshold, g) for p, g in zip(probs, gts)]))


def threshold_search(probs: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> Tuple[float, float]:
    """
    Picks the binarisation cutoff (prob > t) in 0.30..0.70, step 0.01, maximising the mean
    precision; ties go to the lowest threshold.

    Returns:
        tuple[float, float]: (best_threshold, tgs_map).

    Raises:
        ValueError: If the inputs are empty or of different lengths.
    """
    if len(probs) == 0 or len(probs) != len(gts):
        raise ValueError(f"need matched non-empty sequences, got {len(probs)} maps and {len(gts)} masks")
    best_threshold, best_score = SEARCH_THRESHOLDS[0], -1.0
    for threshold in SEARCH_THRESHOLDS:
        score = mean_tgs_precision(probs, gts, threshold)
        if score > best_score:
            best_threshold, best_score = threshold, score
    return best_threshold, best_score


def evaluate(ids: Sequence[str], probs: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> EvalResult:
    """Threshold search followed by per-image scoring at the chosen threshold."""
    threshold, score = threshold_search(probs, gts)
    rows, empty_correct = [], 0
    for sample_id, p, g in zip(ids, probs, gts):
        pred = np.asarray(p) > threshold
        rows.append((sample_id, iou(pred, g), tgs_precision(pred, g)))
        if not np.asarray(g).any() and not pred.any():
            empty_correct += 1
    return EvalResult(score, threshold, rows, empty_correct)


def predict_probs(model, batch: np.ndarray) -> np.ndarray:
    """sigmoid(forward(batch)) as a [B, R, R] array."""
    return tg.stable_sigmoid(model.forward(batch).values)[:, 0]


def tta_hflip(model, batch: np.ndarray) -> np.ndarray:
    """
    Horizontal-flip test-time augmentation.

    Returns:
        np.ndarray: [B, R, R] mean of the plain and un-flipped flipped probability maps.
    """
    batch = np.asarray(batch, dtype=np.float64)
    plain = predict_probs(model, batch)
    flipped = predict_probs(model, batch[..., ::-1].copy())[..., ::-1]
    return 0.5 * (plain + flipped)
