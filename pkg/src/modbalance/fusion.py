"""Availability-masked attention fusion of per-modality feature maps.

At one pyramid level: zero the features of absent modalities, downsample
each modality to a fixed token grid, run pre-norm masked self-attention over
the concatenated modality tokens (absent-modality tokens carry -inf key
logits so they cannot influence anyone), then turn each modality's tokens
into a spatial weight logit map. A softmax across modalities at every
location yields convex combination weights, exactly zero for absent
modalities, and the fused map is the weighted sum of the (masked) inputs.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class MaskedMultiheadAttention(nn.Module):
    """Multi-head attention with an optional boolean mask over key positions.

    Masked keys receive -inf scores before the softmax, so their attention
    weight is exactly zero. Operates on (tokens, channels) sequences.
    """

    def __init__(self, channels: int, n_heads: int, head_dim: Optional[int] = None):
        super().__init__()
        if head_dim is None:
            if channels % n_heads:
                raise ValueError(f"{n_heads} heads do not divide {channels} channels")
            head_dim = channels // n_heads
        self.n_heads = n_heads
        self.head_dim = head_dim
        inner = n_heads * head_dim
        self.q_proj = nn.Linear(channels, inner)
        self.k_proj = nn.Linear(channels, inner)
        self.v_proj = nn.Linear(channels, inner)
        self.out_proj = nn.Linear(inner, channels)

    def attention_weights(
        self, query: torch.Tensor, key: torch.Tensor, key_mask: Optional[torch.Tensor]
    ) -> torch.Tensor:
        nq, nk = query.shape[0], key.shape[0]
        q = self.q_proj(query).reshape(nq, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(nk, self.n_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(key_mask.reshape(1, 1, nk), float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(
        self,
        query: torch.Tensor,
        key_value: Optional[torch.Tensor] = None,
        key_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """key_mask: bool (keys,), True = forbidden. Self-attention if key_value is None."""
        kv = query if key_value is None else key_value
        weights = self.attention_weights(query, kv, key_mask)
        v = self.v_proj(kv).reshape(kv.shape[0], self.n_heads, self.head_dim).transpose(0, 1)
        out = (weights @ v).transpose(0, 1).reshape(query.shape[0], -1)
        return self.out_proj(out)


class MaskedTransformerLayer(nn.Module):
    """Pre-norm residual block: x + MHA(LN(x)); then x + FFN(LN(x))."""

    def __init__(self, channels: int, n_heads: int, head_dim: Optional[int] = None,
                 ffn_ratio: int = 2):
        super().__init__()
        self.norm_attn = nn.LayerNorm(channels)
        self.attn = MaskedMultiheadAttention(channels, n_heads, head_dim)
        self.norm_ffn = nn.LayerNorm(channels)
        hidden = ffn_ratio * channels
        self.ffn = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, tokens: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        tokens = tokens + self.attn(self.norm_attn(tokens), key_mask=key_mask)
        tokens = tokens + self.ffn(self.norm_ffn(tokens))
        return tokens


class MaskedAttentionFusion(nn.Module):
    """Fuses M same-shape feature maps into one, with availability masking."""

    def __init__(
        self,
        channels: int,
        n_modalities: int,
        token_grid: Tuple[int, int] = (8, 8),
        n_layers: int = 2,
        n_heads: int = 2,
        head_dim: Optional[int] = None,
        ffn_ratio: int = 2,
        norm_groups: int = 4,
    ):
        super().__init__()
        self.n_modalities = n_modalities
        self.token_grid = tuple(token_grid)
        n_tokens = token_grid[0] * token_grid[1]
        groups = norm_groups if channels % norm_groups == 0 else 1
        self.downsample = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(groups, channels),
            nn.GELU(),
        )
        self.position = nn.Parameter(torch.zeros(n_modalities * n_tokens, channels))
        nn.init.normal_(self.position, std=0.02)
        self.layers = nn.ModuleList(
            MaskedTransformerLayer(channels, n_heads, head_dim, ffn_ratio)
            for _ in range(n_layers)
        )
        self.weight_head = nn.Linear(channels, 1)

    def forward(
        self, features: torch.Tensor, presence: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """features: (M, C, H, W); presence: (M,) bool. Returns (fused (C, H, W), weights (M, H, W))."""
        m, c, h, w = features.shape
        if m != self.n_modalities:
            raise ValueError(f"expected {self.n_modalities} modalities, got {m}")
        if presence.shape != (m,):
            raise ValueError("presence must be one flag per modality")
        presence = presence.to(torch.bool)
        if not bool(presence.any()):
            raise ValueError("at least one modality must be present")
        gh, gw = self.token_grid
        if gh > h or gw > w:
            raise ValueError(f"token grid {self.token_grid} exceeds feature map {h}x{w}")

        masked = features * presence.view(m, 1, 1, 1).to(features.dtype)
        pooled = F.adaptive_avg_pool2d(self.downsample(masked), self.token_grid)
        tokens = pooled.flatten(2).transpose(1, 2).reshape(m * gh * gw, c)
        tokens = tokens + self.position
        key_mask = (~presence).repeat_interleave(gh * gw)
        for layer in self.layers:
            tokens = layer(tokens, key_mask=key_mask)

        logits = self.weight_head(tokens).reshape(m, 1, gh, gw)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        logits = logits.masked_fill(~presence.view(m, 1, 1, 1), float("-inf"))
        weights = torch.softmax(logits, dim=0)
        fused = (masked * weights).sum(dim=0)
        return fused, weights.squeeze(1)


class AveragingFusion(nn.Module):
    """Ablation stand-in: plain mean over the present modalities."""

    def __init__(self, n_modalities: int):
        super().__init__()
        self.n_modalities = n_modalities

    def forward(
        self, features: torch.Tensor, presence: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        m, _, h, w = features.shape
        presence = presence.to(torch.bool)
        if not bool(presence.any()):
            raise ValueError("at least one modality must be present")
        share = presence.to(features.dtype) / presence.sum()
        weights = share.view(m, 1, 1).expand(m, h, w)
        masked = features * presence.view(m, 1, 1, 1).to(features.dtype)
        fused = (masked * weights.unsqueeze(1)).sum(dim=0)
        return fused, weights
