"""Matching-aware discriminator with soft-threshold spatial attention.

Down-sample blocks encode the image into a mid-resolution feature map. A
position-shared MLP scores each location against the sentence vector; the
energies are normalized with a soft-threshold rule (sigmoid then divide by
the sum, so no probability collapses exponentially) and gate per-position
copies of the sentence vector, which are concatenated back onto the feature
map before the scoring head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError

ATTENTION_MODES = ("soft_threshold", "softmax", "off")


@dataclass
class DiscriminatorConfig:
    resolution: int = 256
    sentence_width: int = 256
    base_channels: int = 64
    max_channels: int = 512
    attention_size: int = 8
    energy_hidden: int = 128
    attention_mode: str = "soft_threshold"

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise InvalidConfigError(f"unknown attention mode {self.attention_mode!r}")
        ratio = self.resolution / self.attention_size
        if ratio < 1 or 2 ** round(math.log2(ratio)) != ratio:
            raise InvalidConfigError(
                "resolution must be attention_size times a power of two")


def full_discriminator_config(**overrides) -> DiscriminatorConfig:
    return DiscriminatorConfig(**overrides)


def desk_discriminator_config(**overrides) -> DiscriminatorConfig:
    defaults = dict(resolution=64, sentence_width=64, base_channels=32,
                    max_channels=128, attention_size=4, energy_hidden=32)
    defaults.update(overrides)
    return DiscriminatorConfig(**defaults)


def soft_threshold(x: torch.Tensor) -> torch.Tensor:
    """Normalize energies as sigmoid(x) / sum(sigmoid(x)) along the last axis.

    The denominator is at most the entry count, so every probability keeps a
    sigmoid(x_k)/K lower bound instead of collapsing like softmax.
    """
    if not torch.isfinite(x).all():
        raise InvalidInputError("attention energies must be finite")
    sq = torch.sigmoid(x)
    return sq / sq.sum(dim=-1, keepdim=True)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        num_down = int(math.log2(cfg.resolution // cfg.attention_size))
        blocks: list[nn.Module] = []
        in_ch, ch = 3, cfg.base_channels
        for _ in range(num_down):
            blocks += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            in_ch, ch = ch, min(ch * 2, cfg.max_channels)
        self.down_blocks = nn.Sequential(*blocks)
        self.feature_channels = in_ch

        self.energy_mlp = nn.Sequential(
            nn.Linear(self.feature_channels + cfg.sentence_width, cfg.energy_hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(cfg.energy_hidden, 1))

        # two further blocks (stride 2 while spatial > 4) then a valid conv
        head_ch = min(2 * self.feature_channels, cfg.max_channels)
        spatial = cfg.attention_size
        latter: list[nn.Module] = []
        in_ch = self.feature_channels + cfg.sentence_width
        for _ in range(2):
            if spatial > 4:
                latter += [nn.Conv2d(in_ch, head_ch, 4, stride=2, padding=1),
                           nn.LeakyReLU(0.2)]
                spatial //= 2
            else:
                latter += [nn.Conv2d(in_ch, head_ch, 3, padding=1),
                           nn.LeakyReLU(0.2)]
            in_ch = head_ch
        self.latter_blocks = nn.Sequential(*latter)
        self.score_conv = nn.Conv2d(head_ch, 1, spatial)

    def downsample_encode(self, image: torch.Tensor) -> torch.Tensor:
        """Encode (B, 3, R, R) images into (B, C, A, A) feature maps."""
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        if image.shape[1:] != (3, self.cfg.resolution, self.cfg.resolution):
            raise InvalidInputError(
                f"expected 3x{self.cfg.resolution}x{self.cfg.resolution} images, "
                f"got {tuple(image.shape[1:])}")
        P = self.down_blocks(image)
        return P.squeeze(0) if single else P

    def attention_energy(self, P: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """Per-position energies from the shared MLP on concat(P[:, w, h], s)."""
        single = P.dim() == 3
        if single:
            P, s = P.unsqueeze(0), s.unsqueeze(0)
        if s.shape[-1] != self.cfg.sentence_width:
            raise InvalidInputError(
                f"sentence width {s.shape[-1]} does not match configured "
                f"{self.cfg.sentence_width}")
        b, c, hh, ww = P.shape
        feats = P.permute(0, 2, 3, 1)                       # (B, H, W, C)
        s_field = s[:, None, None, :].expand(b, hh, ww, s.shape[-1])
        x = self.energy_mlp(torch.cat([feats, s_field], dim=-1)).squeeze(-1)
        return x.squeeze(0) if single else x

    def spatial_attention(self, P: torch.Tensor, s: torch.Tensor):
        """Returns (attention map over positions, gated sentence field)."""
        single = P.dim() == 3
        if single:
            P, s = P.unsqueeze(0), s.unsqueeze(0)
        x = self.attention_energy(P, s)                     # (B, H, W)
        b, hh, ww = x.shape
        alpha = soft_threshold(x.reshape(b, -1)).reshape(b, hh, ww)
        S = s[:, :, None, None] * alpha[:, None, :, :]
        if single:
            return alpha.squeeze(0), S.squeeze(0)
        return alpha, S

    def forward(self, image: torch.Tensor, s: torch.Tensor,
                attention_mode: str | None = None) -> torch.Tensor:
        """Scalar realism-and-match score; higher means more real and matching."""
        mode = attention_mode or self.cfg.attention_mode
        if mode not in ATTENTION_MODES:
            raise InvalidInputError(f"unknown attention mode {mode!r}")
        single = image.dim() == 3
        if single:
            image, s = image.unsqueeze(0), s.unsqueeze(0)
        P = self.downsample_encode(image)
        b, _, hh, ww = P.shape
        if mode == "off":
            S = s[:, :, None, None].expand(b, s.shape[-1], hh, ww)
        else:
            x = self.attention_energy(P, s)
            flat = x.reshape(b, -1)
            if mode == "softmax":
                alpha = torch.softmax(flat, dim=-1).reshape(b, hh, ww)
            else:
                alpha = soft_threshold(flat).reshape(b, hh, ww)
            S = s[:, :, None, None] * alpha[:, None, :, :]
        feats = self.latter_blocks(torch.cat([P, S], dim=1))
        score = self.score_conv(feats).reshape(b)
        return score.squeeze(0) if single else score
