"""Hierarchical ConvLSTM decoder.

Per time step, layer 0 consumes the projected deepest feature map alone; every
layer above it consumes the x2 bilinear upsampling of the previous layer's new
hidden state, merged with its own projected skip according to ``skip_mode``.
The final hidden state is upsampled to image resolution and squashed to a soft
mask by a single 1x1 sigmoid convolution, while the concatenated max-pooled
hidden states of all layers feed three fully connected heads for the box, the
class distribution and the stop score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError

SKIP_MODES = ("concat", "sum", "mult", "none")


@dataclass
class DecoderConfig:
    num_layers: int = 5       # ConvLSTM layers; at most the encoder block count
    hidden_dim: int = 32      # hidden channels of layers 0 and 1
    skip_mode: str = "concat"
    num_classes: int = 3
    kernel_size: int = 3      # all ConvLSTM layers use 3x3 kernels

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")
        if self.kernel_size != 3:
            raise ValueError("ConvLSTM kernels are fixed at 3x3")

    def hidden_channels(self) -> list[int]:
        """Channel schedule: the first two layers at hidden_dim, then halved per layer with a floor of 2."""
        channels = []
        for i in range(self.num_layers):
            if i <= 1:
                channels.append(self.hidden_dim)
            else:
                channels.append(max(2, channels[-1] // 2))
        return channels

    @property
    def pooled_length(self) -> int:
        return sum(self.hidden_channels())


class ConvLSTMCell(nn.Module):
    """Peephole-free ConvLSTM cell with gates computed by one 3x3 convolution."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]):
        h, c = state
        if x.shape[-2:] != h.shape[-2:]:
            raise ShapeError(
                f"input spatial size {tuple(x.shape[-2:])} does not match "
                f"state spatial size {tuple(h.shape[-2:])}"
            )
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        i, f, o, g = torch.split(
            self.gates(torch.cat([x, h], dim=1)), self.hidden_channels, dim=1
        )
        c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        return h_next, c_next


@dataclass
class DecoderState:
    """Per-layer (hidden, cell) tensors carried across the time steps of one image."""

    layers: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    @classmethod
    def zeros(cls, batch: int, channels: list[int], spatial: list[tuple[int, int]],
              dtype=torch.float32, device=None) -> "DecoderState":
        layers = []
        for ch, (h, w) in zip(channels, spatial):
            z = torch.zeros(batch, ch, h, w, dtype=dtype, device=device)
            layers.append((z, z.clone()))
        return cls(layers)


@dataclass
class StepOutput:
    """Batched raw head outputs for one time step."""

    mask: torch.Tensor         # (B, H, W) in (0, 1)
    box: torch.Tensor          # (B, 4) in (0, 1)
    class_probs: torch.Tensor  # (B, C) softmax
    stop: torch.Tensor         # (B,) in (0, 1)


def upsample2(x: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsampling."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class Decoder(nn.Module):
    """Chain of ConvLSTM layers plus the mask / box / class / stop heads.

    Inputs to ``step`` are the already-projected skip tensors; the projections
    themselves live next to the encoder because their input widths are the
    pyramid's, not the decoder's.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.hidden_channels()
        cells = []
        for i, ch in enumerate(channels):
            if i == 0:
                in_ch = ch  # S_0 is projected to the layer-0 hidden width
            elif cfg.skip_mode == "concat":
                in_ch = channels[i - 1] + ch
            else:  # sum / mult merge at the upsampled width; none skips S_i
                in_ch = channels[i - 1]
            cells.append(ConvLSTMCell(in_ch, ch))
        self.cells = nn.ModuleList(cells)
        self.mask_head = nn.Conv2d(channels[-1], 1, 1)
        pooled = cfg.pooled_length
        self.box_head = nn.Linear(pooled, 4)
        self.class_head = nn.Linear(pooled, cfg.num_classes)
        self.stop_head = nn.Linear(pooled, 1)

    def init_state(self, projections: list[torch.Tensor]) -> DecoderState:
        # Layer i lives at 2^i times the deepest spatial size, so the first
        # projection fixes every layer's shape even when upper skips are None.
        ref = projections[0]
        h0, w0 = ref.shape[-2:]
        spatial = [(h0 * 2 ** i, w0 * 2 ** i) for i in range(len(self.cells))]
        return DecoderState.zeros(
            ref.shape[0], self.cfg.hidden_channels(), spatial,
            dtype=ref.dtype, device=ref.device,
        )

    def step(self, projections: list[torch.Tensor], state: DecoderState,
             image_size: tuple[int, int]) -> tuple[StepOutput, DecoderState]:
        """One recurrent step over all layers; returns outputs and the new state."""
        if len(projections) != len(self.cells):
            raise ShapeError(
                f"expected {len(self.cells)} projected maps, got {len(projections)}"
            )
        mode = self.cfg.skip_mode
        new_layers = []
        hiddens = []
        h_prev = None
        for i, cell in enumerate(self.cells):
            if i == 0:
                x = projections[0]
            else:
                up = upsample2(h_prev)
                if mode == "concat":
                    x = torch.cat([up, projections[i]], dim=1)
                elif mode == "sum":
                    x = up + projections[i]
                elif mode == "mult":
                    x = up * projections[i]
                else:
                    x = up
            h, c = cell(x, state.layers[i])
            new_layers.append((h, c))
            hiddens.append(h)
            h_prev = h

        full = F.interpolate(h_prev, size=image_size, mode="bilinear", align_corners=False)
        mask = torch.sigmoid(self.mask_head(full)).squeeze(1)

        pooled = torch.cat([h.amax(dim=(2, 3)) for h in hiddens], dim=1)
        box = torch.sigmoid(self.box_head(pooled))
        class_probs = torch.softmax(self.class_head(pooled), dim=1)
        stop = torch.sigmoid(self.stop_head(pooled)).squeeze(1)

        return StepOutput(mask, box, class_probs, stop), DecoderState(new_layers)
