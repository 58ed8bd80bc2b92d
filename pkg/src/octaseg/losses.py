"""Differentiable Dice / clDice losses and Dice/Jaccard evaluation metrics.

Losses take float tensors in [0, 1] (predictions post-sigmoid); metrics take
binary numpy masks. Every ratio is smoothed so empty masks stay defined:

    dice loss      1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)
    topo precision (sum(skel_p * t) + eps) / (sum(skel_p) + eps)
    clDice loss    w_dice * dice + w_cl * (1 - 2*Tprec*Tsens / (Tprec + Tsens))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 0.2
    cldice_weight: float = 0.8
    skeleton_iterations: int = 10
    smooth: float = 1e-6
    metric_threshold: float = 0.5

    def __post_init__(self) -> None:
        if abs(self.dice_weight + self.cldice_weight - 1.0) > 1e-9:
            raise ValueError("dice_weight + cldice_weight must equal 1")
        if self.skeleton_iterations < 1:
            raise ValueError("skeleton_iterations must be >= 1")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    _check_pair(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def dice_loss_batch(pred: torch.Tensor, target: torch.Tensor,
                    smooth: float = 1e-6) -> torch.Tensor:
    """Per-sample dice loss over the trailing two dims; (B, H, W) -> (B,)."""
    _check_pair(pred, target)
    inter = (pred * target).sum(dim=(-2, -1))
    sums = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (sums + smooth)


# 3x3 soft morphology; pooling pads with -inf so the border acts as background
# for dilation and is ignored by erosion.


def _soft_erode(img: torch.Tensor) -> torch.Tensor:
    return -F.max_pool2d(-img, kernel_size=3, stride=1, padding=1)


def _soft_dilate(img: torch.Tensor) -> torch.Tensor:
    return F.max_pool2d(img, kernel_size=3, stride=1, padding=1)


def _soft_open(img: torch.Tensor) -> torch.Tensor:
    return _soft_dilate(_soft_erode(img))


def soft_skeleton(mask: torch.Tensor, iterations: int = 10) -> torch.Tensor:
    """Iterative min/max-pool skeletonization; keeps gradients intact.

    Accepts (H, W), (B, H, W) or (B, C, H, W) tensors in [0, 1]; the output
    has the same shape and is elementwise <= the input.
    """
    squeeze = mask.dim()
    img = mask
    if squeeze == 2:
        img = img[None, None]
    elif squeeze == 3:
        img = img[:, None]
    skel = F.relu(img - _soft_open(img))
    for _ in range(iterations):
        img = _soft_erode(img)
        delta = F.relu(img - _soft_open(img))
        skel = skel + F.relu(delta - skel * delta)
    if squeeze == 2:
        return skel[0, 0]
    if squeeze == 3:
        return skel[:, 0]
    return skel


def topo_precision(skel_pred: torch.Tensor, target: torch.Tensor,
                   smooth: float = 1e-6) -> torch.Tensor:
    """Fraction of predicted skeleton mass that lies on the target."""
    _check_pair(skel_pred, target)
    return ((skel_pred * target).sum() + smooth) / (skel_pred.sum() + smooth)


def topo_sensitivity(skel_target: torch.Tensor, pred: torch.Tensor,
                     smooth: float = 1e-6) -> torch.Tensor:
    """Fraction of target skeleton mass recovered by the prediction."""
    _check_pair(skel_target, pred)
    return ((skel_target * pred).sum() + smooth) / (skel_target.sum() + smooth)


def cl_dice_loss(pred: torch.Tensor, target: torch.Tensor,
                 config: LossConfig | None = None) -> torch.Tensor:
    """Weighted Dice + centerline-Dice over soft skeletons of pred and target."""
    _check_pair(pred, target)
    return cl_dice_loss_batch(pred[None], target[None], config)[0]


def cl_dice_loss_batch(pred: torch.Tensor, target: torch.Tensor,
                       config: LossConfig | None = None) -> torch.Tensor:
    """Per-sample clDice loss; (B, H, W) -> (B,). One pooling pipeline per batch."""
    config = config or LossConfig()
    _check_pair(pred, target)
    smooth = config.smooth
    skel_pred = soft_skeleton(pred, config.skeleton_iterations)
    skel_target = soft_skeleton(target, config.skeleton_iterations)
    tprec = ((skel_pred * target).sum(dim=(-2, -1)) + smooth) \
        / (skel_pred.sum(dim=(-2, -1)) + smooth)
    tsens = ((skel_target * pred).sum(dim=(-2, -1)) + smooth) \
        / (skel_target.sum(dim=(-2, -1)) + smooth)
    cl_term = 1.0 - 2.0 * tprec * tsens / (tprec + tsens)
    return config.dice_weight * dice_loss_batch(pred, target, smooth) \
        + config.cldice_weight * cl_term


# ---------------------------------------------------------------------------
# evaluation metrics (binary masks, numpy)


def _check_binary_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    for name, arr in (("pred", pred), ("target", target)):
        if arr.dtype != bool and not np.isin(np.unique(arr), (0, 1)).all():
            raise ValueError(f"{name} must be binary")
    return pred.astype(bool), target.astype(bool)


def dice_metric(pred_binary: np.ndarray, target: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); both-empty convention = 1."""
    pred, target = _check_binary_pair(pred_binary, target)
    denom = int(pred.sum()) + int(target.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & target).sum()) / denom


def jaccard_metric(pred_binary: np.ndarray, target: np.ndarray) -> float:
    """|A∩B| / |A∪B|; both-empty convention = 1."""
    pred, target = _check_binary_pair(pred_binary, target)
    union = int((pred | target).sum())
    if union == 0:
        return 1.0
    return int((pred & target).sum()) / union


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)
