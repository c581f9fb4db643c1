"""Relation and prototype distillation between uni-modal and fused features.

Relation distillation works at the encoder bottleneck and has two halves:
channel-covariance alignment (a learnable linear projector maps the
uni-modal covariance into the fused covariance space, mean-squared error
between them) and attention alignment (uni-modal tokens query the fused
tokens through multi-head attention; the output is pulled toward the fused
tokens). Prototype distillation aligns per-class mean feature vectors by
cosine similarity with a per-modality temperature.

The loss functions themselves are differentiable in both the uni-modal and
fused arguments; the Distiller wrapper detaches the fused branch (the
teacher) so distillation gradients only reach the uni-modal encoders and
the alignment machinery itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import MaskedMultiheadAttention

PROTO_COUNT_EPS = 1e-5
PROTO_NORM_EPS = 1e-8


def channel_covariance(feature: torch.Tensor) -> torch.Tensor:
    """C x C covariance of a (C, H, W) map, spatial positions as observations.

    Normalized by the number of positions (population covariance).
    """
    if feature.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(feature.shape)}")
    c = feature.shape[0]
    x = feature.reshape(c, -1).transpose(0, 1)  # positions x channels
    mu = x.mean(dim=0, keepdim=True)
    centered = x - mu
    return centered.transpose(0, 1) @ centered / x.shape[0]


class CovarianceProjector(nn.Module):
    """Learnable linear map on flattened covariances, identity at init."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.linear = nn.Linear(channels * channels, channels * channels, bias=False)
        with torch.no_grad():
            self.linear.weight.copy_(torch.eye(channels * channels))

    def forward(self, cov: torch.Tensor) -> torch.Tensor:
        return self.linear(cov.reshape(-1)).reshape(self.channels, self.channels)


def projected_covariance_mse(
    uni_cov: torch.Tensor, fused_cov: torch.Tensor, projector: CovarianceProjector
) -> torch.Tensor:
    """MSE between the projected uni-modal covariance and the fused covariance."""
    return F.mse_loss(projector(uni_cov), fused_cov)


def covariance_alignment_loss(
    uni_feature: torch.Tensor, fused_feature: torch.Tensor, projector: CovarianceProjector
) -> torch.Tensor:
    """Covariance alignment between two feature maps.

    Differentiable in both arguments; the trainer detaches the fused side to
    keep the teacher fixed.
    """
    return projected_covariance_mse(
        channel_covariance(uni_feature), channel_covariance(fused_feature), projector
    )


class AttentionAlignment(nn.Module):
    """Uni-modal tokens attend over fused tokens; output is pulled to the fused tokens.

    key_mask marks forbidden key positions (True = masked, exactly zero
    attention); with fused-feature keys every position is valid, so the
    training path passes None.
    """

    def __init__(self, channels: int, n_heads: int, head_dim: Optional[int] = None):
        super().__init__()
        self.attn = MaskedMultiheadAttention(channels, n_heads, head_dim)

    @staticmethod
    def tokenize(feature: torch.Tensor) -> torch.Tensor:
        c = feature.shape[0]
        return feature.reshape(c, -1).transpose(0, 1)

    def forward(
        self,
        uni_feature: torch.Tensor,
        fused_feature: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        uni_tokens = self.tokenize(uni_feature)
        fused_tokens = self.tokenize(fused_feature)
        attended = self.attn(uni_tokens, key_value=fused_tokens, key_mask=key_mask)
        return attended, F.mse_loss(attended, fused_tokens)


def relation_loss(
    cov_losses: Dict[int, torch.Tensor],
    attn_losses: Dict[int, torch.Tensor],
    alpha1: torch.Tensor,
) -> torch.Tensor:
    """Mean over present modalities of alpha1 * cov + (1 - alpha1) * attn."""
    if not cov_losses:
        raise ValueError("no present modalities")
    if set(cov_losses) != set(attn_losses):
        raise ValueError("covariance and attention losses must cover the same modalities")
    terms = [alpha1 * cov_losses[m] + (1.0 - alpha1) * attn_losses[m] for m in cov_losses]
    return torch.stack(terms).mean()


def majority_pool_labels(label: torch.Tensor, target_hw: Tuple[int, int], n_classes: int) -> torch.Tensor:
    """Downsample a label map by per-block majority vote (ties -> lowest class)."""
    h, w = label.shape
    th, tw = target_hw
    if h % th or w % tw:
        raise ValueError(f"label {h}x{w} not divisible by target {th}x{tw}")
    fh, fw = h // th, w // tw
    onehot = F.one_hot(label.long(), num_classes=n_classes)
    blocks = onehot.reshape(th, fh, tw, fw, n_classes).sum(dim=(1, 3))
    return blocks.argmax(dim=-1)


def class_prototypes(
    feature: torch.Tensor,
    label: torch.Tensor,
    n_classes: int,
    present: bool = True,
    eps: float = PROTO_COUNT_EPS,
) -> torch.Tensor:
    """Per-class mean feature vectors: sum over the class's pixels / (count + eps).

    Returns (n_classes, C); empty classes give (near-)zero rows and an
    absent modality zeroes everything via the presence indicator.
    """
    c = feature.shape[0]
    if label.shape != feature.shape[1:]:
        raise ValueError("label map must match the feature map resolution")
    flat = feature.reshape(c, -1)
    onehot = F.one_hot(label.reshape(-1).long(), num_classes=n_classes).to(feature.dtype)
    sums = onehot.transpose(0, 1) @ flat.transpose(0, 1)  # classes x channels
    counts = onehot.sum(dim=0, keepdim=True).transpose(0, 1)
    protos = sums / (counts + eps)
    if not present:
        protos = protos * 0.0
    return protos


def prototype_alignment(
    fused_protos: torch.Tensor,
    uni_protos: torch.Tensor,
    tau: float,
) -> Tuple[torch.Tensor, torch.Tensor, int]:
    """Per-modality prototype terms: (sum over valid classes, mean over valid classes, n_valid).

    A class is valid when both prototypes have norm > 1e-8 (cosine defined).
    Each valid class contributes 1 - cos(fused, uni)/tau. Returns zeros when
    no class is valid. Differentiable in both prototype sets.
    """
    fused_norms = fused_protos.norm(dim=1)
    uni_norms = uni_protos.norm(dim=1)
    valid = (fused_norms > PROTO_NORM_EPS) & (uni_norms > PROTO_NORM_EPS)
    if not bool(valid.any()):
        zero = torch.zeros((), dtype=uni_protos.dtype)
        return zero, zero, 0
    cos = (fused_protos[valid] * uni_protos[valid]).sum(dim=1) / (
        fused_norms[valid] * uni_norms[valid]
    )
    cos = cos.clamp(-1.0, 1.0)  # rounding can push |cos| past 1
    terms = 1.0 - cos / tau
    return terms.sum(), terms.mean(), int(valid.sum())


@dataclass
class DistillationOutputs:
    relation: torch.Tensor
    prototype: torch.Tensor
    cov_losses: Dict[int, torch.Tensor]
    attn_losses: Dict[int, torch.Tensor]
    relation_gaps: Dict[int, float]
    prototype_gaps: Dict[int, float]
    alpha1: float


class Distiller(nn.Module):
    """Bundles the learnable distillation pieces and computes all terms.

    alpha1 (the covariance-vs-attention balance) is a raw scalar squashed
    through a sigmoid onto (0,1) and trained by the same optimizer as the
    network weights.
    """

    def __init__(
        self,
        channels: int,
        n_heads: int = 2,
        head_dim: Optional[int] = None,
        alpha1_init: float = 0.6,
        taus: Optional[Sequence[float]] = None,
        n_modalities: int = 3,
    ):
        super().__init__()
        if not (0.0 < alpha1_init < 1.0):
            raise ValueError("alpha1 must start inside (0, 1)")
        self.projector = CovarianceProjector(channels)
        self.alignment = AttentionAlignment(channels, n_heads, head_dim)
        self.raw_alpha1 = nn.Parameter(
            torch.tensor(math.log(alpha1_init / (1.0 - alpha1_init)), dtype=torch.float64)
        )
        if taus is None:
            taus = [1.0] * n_modalities
        self.taus = tuple(float(t) for t in taus)

    @property
    def alpha1(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_alpha1)

    def forward(
        self,
        uni_bottlenecks: Dict[int, torch.Tensor],
        fused_bottleneck: torch.Tensor,
        label_small: torch.Tensor,
        n_classes: int,
        detach_teacher: bool = True,
    ) -> DistillationOutputs:
        """uni_bottlenecks: present modalities' bottleneck features only.

        detach_teacher keeps the fused branch fixed (knowledge flows from
        fused to uni-modal, never backwards); disable it only to check the
        losses' differentiability in both arguments.
        """
        if not uni_bottlenecks:
            raise ValueError("no present modalities to distill")
        teacher = fused_bottleneck.detach() if detach_teacher else fused_bottleneck
        alpha1 = self.alpha1
        cov_losses, attn_losses = {}, {}
        rel_gaps, proto_gaps = {}, {}
        fused_protos = class_prototypes(teacher, label_small, n_classes)
        proto_sums = []
        for m, feat in uni_bottlenecks.items():
            cov_losses[m] = covariance_alignment_loss(feat, teacher, self.projector)
            _, attn_losses[m] = self.alignment(feat, teacher)
            rel_gaps[m] = float(alpha1.detach() * cov_losses[m].detach()
                                + (1.0 - alpha1.detach()) * attn_losses[m].detach())
            uni_protos = class_prototypes(feat, label_small, n_classes)
            proto_sum, proto_mean, _ = prototype_alignment(fused_protos, uni_protos, self.taus[m])
            proto_sums.append(proto_sum)
            proto_gaps[m] = float(proto_mean.detach())
        relation = relation_loss(cov_losses, attn_losses, alpha1)
        prototype = torch.stack(proto_sums).mean()
        return DistillationOutputs(
            relation=relation,
            prototype=prototype,
            cov_losses=cov_losses,
            attn_losses=attn_losses,
            relation_gaps=rel_gaps,
            prototype_gaps=proto_gaps,
            alpha1=float(alpha1.detach()),
        )
