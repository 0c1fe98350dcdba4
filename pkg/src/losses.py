"""Segmentation losses on [B, 1, H, W] logits and the staged weighting of the two-stage curriculum."""
from dataclasses import dataclass, field

import numpy as np

from src import tensorgraph as tg
from src.errors import ShapeError
from src.tensorgraph import Node

DICE_SMOOTH = 1.0
STAGE1_WEIGHTS = {"bce": 0.5, "dice": 0.3, "lovasz": 0.2}


@dataclass
class LossBreakdown:
    """
    All loss components of one step; `node` is the differentiable total.

    Attributes:
        bce (float): Binary cross-entropy.
        dice (float): Soft Dice loss.
        lovasz (float): Lovasz hinge loss.
        total (float): Stage-weighted total.
        stage (int): 1 (weighted sum) or 2 (pure Lovasz).
        node (Node): Graph node holding total.
    """
    bce: float
    dice: float
    lovasz: float
    total: float
    stage: int
    node: Node = field(repr=False, compare=False, default=None)

    def as_dict(self) -> dict:
        return {"bce": self.bce, "dice": self.dice, "lovasz": self.lovasz, "total": self.total}


def _targets(logits: Node, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    return t


def bce_with_logits(logits: Node, targets) -> Node:
    """
    Mean binary cross-entropy, max(z, 0) - z t + log(1 + exp(-|z|)) per pixel.

    Raises:
        ShapeError: If targets and logits differ in shape.
    """
    t = _targets(logits, targets)
    z = logits.values
    loss = np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    n = z.size

    def backward_fn(g):
        logits.accumulate(g * (tg.stable_sigmoid(z) - t) / n)
    return tg.make_node(loss, (logits,), "bce_with_logits", backward_fn)


def soft_dice(logits: Node, targets, smooth: float = DICE_SMOOTH) -> Node:
    """
    Batch mean of 1 - (2 sum(p t) + eps) / (sum p + sum t + eps) with p = sigmoid(z), per sample.

    Raises:
        ShapeError: If targets and logits differ in shape.
    """
    t = _targets(logits, targets)
    batch = t.shape[0]
    p = tg.stable_sigmoid(logits.values).reshape(batch, -1)
    tf = t.reshape(batch, -1)
    inter = (p * tf).sum(axis=1)
    denom = p.sum(axis=1) + tf.sum(axis=1) + smooth
    numer = 2.0 * inter + smooth
    loss = np.mean(1.0 - numer / denom)

    def backward_fn(g):
        d_p = -(2.0 * tf * denom[:, None] - numer[:, None]) / (denom[:, None] ** 2) / batch
        logits.accumulate(g * (d_p * p * (1.0 - p)).reshape(logits.shape))
    return tg.make_node(loss, (logits,), "soft_dice", backward_fn)


def lovasz_gradient(gt_sorted: np.ndarray) -> np.ndarray:
    """
    Jaccard-loss increments along a chain of growing error sets.

    Args:
        gt_sorted (np.ndarray): Binary labels ordered by descending hinge error.

    Returns:
        np.ndarray: g_k = J_k - J_{k-1} with J_0 = 0.
    """
    total = gt_sorted.sum()
    intersection = total - np.cumsum(gt_sorted)
    union = total + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge(logits: Node, targets) -> Node:
    """
    Lovasz hinge per flattened image, averaged over the batch.

    Hinge errors 1 - z s (s = 2t - 1) are stably sorted in descending order, so ties keep
    pixel order; the sort permutation is constant under differentiation.

    Raises:
        ShapeError: If targets and logits differ in shape.
    """
    t = _targets(logits, targets)
    batch = t.shape[0]
    z = logits.values.reshape(batch, -1)
    tf = t.reshape(batch, -1)
    signs = 2.0 * tf - 1.0
    errors = 1.0 - z * signs
    d_z = np.zeros_like(z)
    losses = np.empty(batch)
    for i in range(batch):
        order = np.argsort(-errors[i], kind="stable")
        e_sorted = errors[i, order]
        grad = lovasz_gradient(tf[i, order])
        losses[i] = np.dot(np.maximum(e_sorted, 0.0), grad)
        d_sorted = grad * (e_sorted > 0)
        d_z[i, order] = -d_sorted * signs[i, order]

    def backward_fn(g):
        logits.accumulate(g * d_z.reshape(logits.shape) / batch)
    return tg.make_node(losses.mean(), (logits,), "lovasz_hinge", backward_fn)


def staged_loss(logits: Node, targets, stage: int) -> LossBreakdown:
    """
    Loss of one curriculum stage.

    Stage 1 is 0.5 BCE + 0.3 Dice + 0.2 Lovasz; stage 2 is pure Lovasz. All components are
    reported in both stages.

    Raises:
        ValueError: If stage is not 1 or 2.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    bce = bce_with_logits(logits, targets)
    dice = soft_dice(logits, targets)
    lovasz = lovasz_hinge(logits, targets)
    if stage == 1:
        total = tg.add(tg.add(tg.scalar_mul(bce, STAGE1_WEIGHTS["bce"]),
                              tg.scalar_mul(dice, STAGE1_WEIGHTS["dice"])),
                       tg.scalar_mul(lovasz, STAGE1_WEIGHTS["lovasz"]))
    else:
        total = lovasz
    return LossBreakdown(bce=float(bce.values), dice=float(dice.values), lovasz=float(lovasz.values),
                         total=float(total.values), stage=stage, node=total)
