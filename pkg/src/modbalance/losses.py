"""Segmentation losses and the total training objective.

The task loss combines soft Dice (mean over foreground classes, smoothing
1e-5) with frequency-weighted cross-entropy. Deep supervision sums the
per-level task losses of the fusion decoder with weights 1/2^l after
upsampling each tap to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5
CLASS_WEIGHT_MIN = 0.1
CLASS_WEIGHT_MAX = 10.0


def class_frequency_weights(label: torch.Tensor, n_classes: int) -> torch.Tensor:
    """Inverse-frequency CE weights, 1.0 on a balanced batch, clipped to [0.1, 10].

    Classes absent from the batch get weight 1.0 (they contribute no pixels).
    """
    counts = torch.bincount(label.reshape(-1), minlength=n_classes).to(torch.float64)
    total = counts.sum()
    weights = torch.ones(n_classes, dtype=torch.float64)
    present = counts > 0
    weights[present] = total / (n_classes * counts[present])
    return weights.clamp(CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX)


def soft_dice_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """1 - mean soft Dice over foreground classes.

    logits: (C, H, W); label: (H, W) integer map.
    """
    n_classes = logits.shape[0]
    probs = torch.softmax(logits, dim=0)
    onehot = F.one_hot(label, num_classes=n_classes).permute(2, 0, 1).to(logits.dtype)
    inter = (probs * onehot).sum(dim=(1, 2))
    denom = probs.sum(dim=(1, 2)) + onehot.sum(dim=(1, 2))
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 1.0 - dice[1:].mean()


def dice_ce_loss(
    logits: torch.Tensor,
    label: torch.Tensor,
    class_weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Soft Dice + weighted cross-entropy of one logit map against a label map."""
    if logits.ndim != 3:
        raise ValueError(f"expected (C, H, W) logits, got {tuple(logits.shape)}")
    n_classes = logits.shape[0]
    if label.shape != logits.shape[1:]:
        raise ValueError(f"label shape {tuple(label.shape)} does not match logits {tuple(logits.shape)}")
    if int(label.min()) < 0 or int(label.max()) >= n_classes:
        raise ValueError(f"label values must lie in [0, {n_classes})")
    if class_weights is None:
        class_weights = class_frequency_weights(label, n_classes)
    ce = F.cross_entropy(
        logits.unsqueeze(0), label.unsqueeze(0), weight=class_weights.to(logits.dtype)
    )
    return soft_dice_loss(logits, label) + ce


def deep_supervision_loss(
    level_logits: Sequence[torch.Tensor], label: torch.Tensor
) -> torch.Tensor:
    """Sum of per-level task losses with weights 1/2^l (l=1 is full resolution).

    level_logits[l-1] holds the level-l tap at 1/2^(l-1) resolution; taps are
    bilinearly upsampled to the label's resolution before the loss.
    """
    full = label.shape
    total = None
    for i, logits in enumerate(level_logits):
        level = i + 1
        if logits.shape[1:] != full:
            logits = F.interpolate(
                logits.unsqueeze(0), size=full, mode="bilinear", align_corners=False
            ).squeeze(0)
        term = dice_ce_loss(logits, label) / (2.0**level)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no supervision taps given")
    return total


def per_modality_seg_losses(
    uni_logits: Dict[int, torch.Tensor], label: torch.Tensor
) -> Dict[int, torch.Tensor]:
    """Full-resolution task loss per present modality; absent ones emit nothing."""
    return {m: dice_ce_loss(logits, label) for m, logits in uni_logits.items()}


@dataclass
class LossBreakdown:
    """The four objective components, their weights, and the weighted total."""

    fuse: torch.Tensor
    sep: torch.Tensor
    relation: torch.Tensor
    prototype: torch.Tensor
    lambdas: tuple = (2.0, 1.0, 0.5, 0.5)
    sep_per_modality: Dict[int, float] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        l1, l2, l3, l4 = self.lambdas
        return l1 * self.fuse + l2 * self.sep + l3 * self.relation + l4 * self.prototype

    def component_values(self) -> Dict[str, float]:
        return {
            "fuse": float(self.fuse.detach()),
            "sep": float(self.sep.detach()),
            "relation": float(self.relation.detach()),
            "prototype": float(self.prototype.detach()),
            "total": float(self.total.detach()),
        }
