"""Convolutional backbone producing the multi-scale feature pyramid.

The backbone is a stack of ``num_blocks`` strided blocks; block ``i`` (counting from
the input) halves the spatial resolution exactly once, so the pyramid entry
``f_0`` is the deepest (smallest) map and ``f_{num_blocks-1}`` the shallowest, with
spatial size doubling from each entry to the next.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .core import ShapeError


@dataclass
class EncoderConfig:
    num_blocks: int = 5         # strided blocks / pyramid levels
    base_channels: int = 16     # channels of the shallowest block
    channel_growth: int = 2     # per-block channel multiplier going deeper

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.base_channels < 1 or self.channel_growth < 1:
            raise ValueError("channel schedule must be positive")

    @property
    def stride(self) -> int:
        return 2 ** self.num_blocks

    def block_channels(self) -> list[int]:
        """Output channels of blocks 1..num_blocks in application order (shallow first)."""
        return [self.base_channels * self.channel_growth ** i for i in range(self.num_blocks)]

    def pyramid_channels(self) -> list[int]:
        """Channels of the pyramid [f_0 .. f_last], deepest first."""
        return list(reversed(self.block_channels()))


class EncoderBlock(nn.Module):
    """3x3 conv -> ReLU -> 3x3 stride-2 conv. Halves the resolution once."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.act = nn.ReLU()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class Encoder(nn.Module):
    """Backbone mapping a (B, 3, h, w) image batch to its feature pyramid."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = 3
        for out_ch in cfg.block_channels():
            blocks.append(EncoderBlock(in_ch, out_ch))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Returns the pyramid [f_0 .. f_last], deepest map first."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, h, w) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        s = self.cfg.stride
        if h % s or w % s:
            raise ShapeError(f"image dims ({h}, {w}) must be divisible by the total stride {s}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        feats.reverse()  # deepest first
        return feats


class Projection(nn.Module):
    """1x1 convolution reducing a pyramid map to the decoder's channel budget."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.conv(f)

    @torch.no_grad()
    def reset_identity(self):
        """Make the projection a channel-wise identity (requires in == out)."""
        out_ch, in_ch = self.conv.weight.shape[:2]
        if out_ch != in_ch:
            raise ShapeError("identity projection needs matching channel counts")
        self.conv.weight.zero_()
        for c in range(out_ch):
            self.conv.weight[c, c, 0, 0] = 1.0
        self.conv.bias.zero_()
