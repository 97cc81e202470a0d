"""One-stage image generator.

Noise seeds both the initial 4x4 feature map and the recurrent controller.
Each up-sample block doubles the spatial size and is followed by a
recurrently-conditioned fusion block; a final convolution plus tanh emits the
image. A stacked-MLP conditioning variant (no recurrent state, independent
per-layer heads on [z; s]) is available for the isolated-fusion ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError
from .rat_core import (AffineHeadBank, GateTrace, RATBlock, RATBlockConfig,
                       RecurrentController, affine_transform)


@dataclass
class GeneratorConfig:
    noise_width: int = 100
    sentence_width: int = 256
    num_blocks: int = 6
    base_channels: int = 512
    min_channels: int = 32
    initial_size: int = 4
    sub_units: int = 2              # affine/conv pairs per fusion block
    hidden_width: int = 256         # controller width
    variant: str = "rat"            # "rat" | "stacked_mlp"

    def __post_init__(self):
        if self.noise_width < 1:
            raise InvalidConfigError("noise width must be >= 1")
        if self.variant not in ("rat", "stacked_mlp"):
            raise InvalidConfigError(f"unknown generator variant {self.variant!r}")

    @property
    def resolution(self) -> int:
        return self.initial_size * 2 ** self.num_blocks

    def channel_schedule(self) -> list[int]:
        """Output channels of each up-sample block (halved per block, floored)."""
        return [max(self.base_channels >> (b + 1), self.min_channels)
                for b in range(self.num_blocks)]


def full_generator_config(**overrides) -> GeneratorConfig:
    return GeneratorConfig(**overrides)


def desk_generator_config(**overrides) -> GeneratorConfig:
    defaults = dict(noise_width=16, sentence_width=64, num_blocks=4,
                    base_channels=64, hidden_width=64)
    defaults.update(overrides)
    return GeneratorConfig(**defaults)


class UpsampleBlock(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3 conv with a 1x1 residual skip."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.skip = (nn.Identity() if in_channels == out_channels
                     else nn.Conv2d(in_channels, out_channels, 1))

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(fm, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.conv(up), 0.2) + self.skip(up)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.channel_schedule()
        self.seed_proj = nn.Linear(
            cfg.noise_width, cfg.base_channels * cfg.initial_size ** 2)
        ins = [cfg.base_channels] + channels[:-1]
        self.up_blocks = nn.ModuleList(
            UpsampleBlock(i, o) for i, o in zip(ins, channels))
        self.rat_blocks = nn.ModuleList(
            RATBlock(RATBlockConfig(ch, cfg.sub_units, cfg.hidden_width,
                                    cfg.sentence_width))
            for ch in channels)
        fusion_channels = [ch for ch in channels for _ in range(cfg.sub_units)]
        if cfg.variant == "rat":
            self.controller = RecurrentController(
                cfg.noise_width, cfg.sentence_width, cfg.hidden_width)
            self.heads = AffineHeadBank(cfg.hidden_width, fusion_channels)
        else:
            self.controller = None
            self.heads = AffineHeadBank(
                cfg.noise_width + cfg.sentence_width, fusion_channels)
        self.to_rgb = nn.Conv2d(channels[-1], 3, 3, padding=1)

    @property
    def fusion_layer_count(self) -> int:
        return self.cfg.num_blocks * self.cfg.sub_units

    def seed_feature_map(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.noise_width:
            raise InvalidInputError(
                f"noise width {z.shape[-1]} does not match configured {self.cfg.noise_width}")
        flat = self.seed_proj(z)
        shape = (self.cfg.base_channels, self.cfg.initial_size, self.cfg.initial_size)
        return flat.reshape(*z.shape[:-1], *shape)

    def forward(self, z: torch.Tensor, s: torch.Tensor,
                trace: GateTrace | None = None) -> torch.Tensor:
        """Synthesize images in [-1, 1]; accepts batched or single inputs."""
        single = z.dim() == 1
        if single:
            z, s = z.unsqueeze(0), s.unsqueeze(0)
        if s.shape[-1] != self.cfg.sentence_width:
            raise InvalidInputError(
                f"sentence width {s.shape[-1]} does not match configured {self.cfg.sentence_width}")
        fm = self.seed_feature_map(z)
        steps = [0]
        if self.cfg.variant == "rat":
            state = self.controller.init_state(z)
            for b, (up, rat) in enumerate(zip(self.up_blocks, self.rat_blocks)):
                fm = up(fm)
                fm, state = rat(fm, state, s, self.controller, self.heads,
                                first_layer_index=b * self.cfg.sub_units,
                                trace=trace, step_counter=steps)
            assert steps[0] == self.fusion_layer_count
        else:
            zs = torch.cat([z, s], dim=-1)
            layer = 0
            for up, rat in zip(self.up_blocks, self.rat_blocks):
                fm = up(fm)
                for conv in rat.convs:
                    params = self.heads.predict(zs, layer)
                    fm = affine_transform(fm, params)
                    fm = F.leaky_relu(conv(fm), 0.2)
                    layer += 1
        img = torch.tanh(self.to_rgb(fm))
        return img.squeeze(0) if single else img
