"""Multi-encoder, dual-decoder segmentation network.

One convolutional encoder per modality, availability-masked attention fusion
at every pyramid level, a fusion decoder with deep-supervision taps at every
level, and a single decoder shared by all modalities for the uni-modal
predictions. Plain U-Net-style backbone: two conv+groupnorm+GELU blocks per
level, stride-2 downsampling, nearest-neighbor upsampling with skip concat.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import AveragingFusion, MaskedAttentionFusion

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class NetConfig:
    n_modalities: int = 3
    n_classes: int = 3
    n_levels: int = 3
    base_channels: int = 8
    token_grid: Tuple[int, int] = (8, 8)
    attn_layers: int = 2
    n_heads: int = 2
    head_dim: Optional[int] = None
    ffn_ratio: int = 2
    norm_groups: int = 4
    use_fusion_attention: bool = True  # False swaps in the masked-mean ablation
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("need at least two pyramid levels")
        if self.n_modalities < 1 or self.n_classes < 2:
            raise ValueError("need >=1 modality and >=2 classes")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * 2**l for l in range(self.n_levels))

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return {
            "n_modalities": self.n_modalities,
            "n_classes": self.n_classes,
            "n_levels": self.n_levels,
            "base_channels": self.base_channels,
            "token_grid": list(self.token_grid),
            "attn_layers": self.attn_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "ffn_ratio": self.ffn_ratio,
            "norm_groups": self.norm_groups,
            "use_fusion_attention": self.use_fusion_attention,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["token_grid"] = tuple(d["token_grid"])
        return cls(**d)


def conv_block(in_ch: int, out_ch: int, norm_groups: int) -> nn.Sequential:
    groups = norm_groups if out_ch % norm_groups == 0 else 1
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.GELU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(groups, out_ch),
        nn.GELU(),
    )


class ModalityEncoder(nn.Module):
    """Single-channel-input pyramid encoder; channels double per level."""

    def __init__(self, config: NetConfig):
        super().__init__()
        ch = config.channels
        self.stem = conv_block(1, ch[0], config.norm_groups)
        self.downs = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for l in range(1, config.n_levels):
            self.downs.append(nn.Conv2d(ch[l - 1], ch[l], 3, stride=2, padding=1))
            self.blocks.append(conv_block(ch[l], ch[l], config.norm_groups))

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        """image: (1, H, W) -> per-level features [(C_1, H, W), (C_2, H/2, W/2), ...]."""
        x = self.stem(image.unsqueeze(0))
        levels = [x]
        for down, block in zip(self.downs, self.blocks):
            x = block(down(x))
            levels.append(x)
        return [lvl.squeeze(0) for lvl in levels]


class PyramidDecoder(nn.Module):
    """U-Net decoder over a feature pyramid, optional per-level logit taps.

    With deep_supervision the forward returns [level-1 ... level-L] logits
    (level 1 at full resolution); otherwise just the full-resolution logits.
    """

    def __init__(self, config: NetConfig, deep_supervision: bool):
        super().__init__()
        ch = config.channels
        self.deep_supervision = deep_supervision
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        for l in range(config.n_levels - 1, 0, -1):  # decode from level L down to 1
            self.blocks.append(conv_block(ch[l] + ch[l - 1], ch[l - 1], config.norm_groups))
        head_channels = list(ch) if deep_supervision else [ch[0]]
        for hc in head_channels:
            self.heads.append(nn.Conv2d(hc, config.n_classes, 1))

    def forward(self, pyramid: Sequence[torch.Tensor]):
        levels = [lvl.unsqueeze(0) for lvl in pyramid]
        x = levels[-1]
        taps: Dict[int, torch.Tensor] = {}
        if self.deep_supervision:
            taps[len(levels)] = self.heads[len(levels) - 1](x)
        for i, block in enumerate(self.blocks):
            skip_level = len(levels) - 2 - i
            skip = levels[skip_level]
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
            level = skip_level + 1
            if self.deep_supervision:
                taps[level] = self.heads[level - 1](x)
        if not self.deep_supervision:
            return self.heads[0](x).squeeze(0)
        return [taps[l].squeeze(0) for l in range(1, len(levels) + 1)]


@dataclass
class NetOutputs:
    """Everything one forward pass produces for a single sample."""

    uni_features: List[List[torch.Tensor]]  # [modality][level], unmasked encoder outputs
    fused_features: List[torch.Tensor]  # [level]
    fusion_weights: List[torch.Tensor]  # [level], each (M, H_l, W_l)
    fused_logits: List[torch.Tensor]  # [level 1..L] taps, level 1 full resolution
    uni_logits: Dict[int, torch.Tensor]  # present modalities only, full resolution


class MultiModalSegNet(nn.Module):
    """Encoders + per-level fusion + fusion decoder + shared uni-modal decoder."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleList(
            ModalityEncoder(config) for _ in range(config.n_modalities)
        )
        if config.use_fusion_attention:
            self.fusion = nn.ModuleList(
                MaskedAttentionFusion(
                    channels=c,
                    n_modalities=config.n_modalities,
                    token_grid=config.token_grid,
                    n_layers=config.attn_layers,
                    n_heads=config.n_heads,
                    head_dim=config.head_dim,
                    ffn_ratio=config.ffn_ratio,
                    norm_groups=config.norm_groups,
                )
                for c in config.channels
            )
        else:
            self.fusion = nn.ModuleList(
                AveragingFusion(config.n_modalities) for _ in config.channels
            )
        self.fused_decoder = PyramidDecoder(config, deep_supervision=True)
        self.shared_decoder = PyramidDecoder(config, deep_supervision=False)
        self.to(config.torch_dtype)

    def check_input(self, images: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if images.ndim != 3 or images.shape[0] != cfg.n_modalities:
            raise ValueError(
                f"expected images ({cfg.n_modalities}, H, W), got {tuple(images.shape)}"
            )
        if presence.shape != (cfg.n_modalities,):
            raise ValueError("presence must have one flag per modality")
        h, w = images.shape[1:]
        down = 2 ** (cfg.n_levels - 1)
        if h % down or w % down:
            raise ValueError(f"image size {h}x{w} must be divisible by {down}")
        return presence.to(torch.bool)

    def encode(self, images: torch.Tensor) -> List[List[torch.Tensor]]:
        """Per-modality pyramids; absent (zero) images still pass through."""
        return [
            enc(images[m : m + 1]) for m, enc in enumerate(self.encoders)
        ]

    def fuse(
        self, uni_features: List[List[torch.Tensor]], presence: torch.Tensor
    ) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        fused, weights = [], []
        for l, fusion in enumerate(self.fusion):
            stacked = torch.stack([uni_features[m][l] for m in range(len(uni_features))])
            f, a = fusion(stacked, presence)
            fused.append(f)
            weights.append(a)
        return fused, weights

    def forward(self, images: torch.Tensor, presence: torch.Tensor) -> NetOutputs:
        presence = self.check_input(images, presence)
        images = images.to(self.config.torch_dtype)
        uni_features = self.encode(images)
        fused_features, fusion_weights = self.fuse(uni_features, presence)
        fused_logits = self.fused_decoder(fused_features)
        uni_logits = {
            m: self.shared_decoder(uni_features[m])
            for m in range(self.config.n_modalities)
            if bool(presence[m])
        }
        return NetOutputs(
            uni_features=uni_features,
            fused_features=fused_features,
            fusion_weights=fusion_weights,
            fused_logits=fused_logits,
            uni_logits=uni_logits,
        )

    def encoder_parameters(self) -> Dict[int, List[torch.Tensor]]:
        """Modality-specific parameters, in fixed per-encoder order."""
        return {m: list(enc.parameters()) for m, enc in enumerate(self.encoders)}
