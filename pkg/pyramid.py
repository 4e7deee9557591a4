"""
Simple Feature Pyramid
Builds C2..C5 (strides 4, 8, 16, 32) from the single 1/16 encoder map, no lateral fusion
"""

import math
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from api_models import NormType, PyramidConfig
from encoder import LayerNorm2d
from errors import DimensionError

# Fewer values per group than this and the statistics come from all channels
MIN_GROUP_ELEMENTS = 16


@dataclass
class FeaturePyramid:
    """Four B x d maps; c2 is 4x, c3 2x, c4 1x and c5 0.5x the encoder grid"""
    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor

    @property
    def levels(self) -> List[torch.Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]

    @property
    def memory_levels(self) -> List[torch.Tensor]:
        """Levels the decoder attends to"""
        return [self.c3, self.c4, self.c5]


class PyramidGroupNorm(nn.GroupNorm):
    """
    GroupNorm that falls back to a single group on small maps.

    With one group per channel a 1x1 map normalises every value to the bias;
    a single group keeps the per-channel differences.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        per_group = (self.num_channels // self.num_groups) * x.shape[-2] * x.shape[-1]
        groups = self.num_groups if per_group >= MIN_GROUP_ELEMENTS else 1
        return F.group_norm(x, groups, self.weight, self.bias, self.eps)


def group_count(channels: int) -> int:
    """Up to 32 groups with at least two channels each"""
    if channels % 2:
        return 1
    return math.gcd(32, channels // 2)


def make_norm(norm: NormType, channels: int) -> nn.Module:
    if norm == NormType.LAYER:
        return LayerNorm2d(channels)
    return PyramidGroupNorm(group_count(channels), channels)


class PyramidLevel(nn.Module):
    """Resampling branch followed by a 1x1 projection + norm to the shared dim"""

    def __init__(self, resample: nn.Module, in_dim: int, out_dim: int, norm: NormType):
        super().__init__()
        self.resample = resample
        self.project = nn.Sequential(
            nn.Conv2d(in_dim, out_dim, kernel_size=1, bias=False),
            make_norm(norm, out_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.resample(x))


class SimpleFeaturePyramid(nn.Module):
    """
    ViTDet-style pyramid.

    x4: two stride-2 deconvolutions with norm + GELU in between
    x2: one stride-2 deconvolution
    x1: identity
    x0.5: stride-2 max pooling
    """

    def __init__(self, in_dim: int, cfg: PyramidConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.dim
        up4 = nn.Sequential(
            nn.ConvTranspose2d(in_dim, in_dim // 2, kernel_size=2, stride=2),
            make_norm(cfg.norm, in_dim // 2),
            nn.GELU(),
            nn.ConvTranspose2d(in_dim // 2, in_dim // 4, kernel_size=2, stride=2),
        )
        up2 = nn.ConvTranspose2d(in_dim, in_dim // 2, kernel_size=2, stride=2)
        self.levels = nn.ModuleList([
            PyramidLevel(up4, in_dim // 4, dim, cfg.norm),
            PyramidLevel(up2, in_dim // 2, dim, cfg.norm),
            PyramidLevel(nn.Identity(), in_dim, dim, cfg.norm),
            PyramidLevel(nn.MaxPool2d(kernel_size=2, stride=2), in_dim, dim, cfg.norm),
        ])

    def forward(self, f16: torch.Tensor) -> FeaturePyramid:
        if f16.dim() != 4:
            raise DimensionError(f"Expected a B x C x h x w map, got {tuple(f16.shape)}")
        h, w = f16.shape[-2:]
        if h % 2 != 0 or w % 2 != 0:
            raise DimensionError(f"Encoder grid {h}x{w} must be even for stride-2 pooling")
        c2, c3, c4, c5 = (level(f16) for level in self.levels)
        return FeaturePyramid(c2=c2, c3=c3, c4=c4, c5=c5)


def build_pyramid(f16: torch.Tensor, pyramid: SimpleFeaturePyramid) -> FeaturePyramid:
    """Run the pyramid on one encoder map"""
    return pyramid(f16)
