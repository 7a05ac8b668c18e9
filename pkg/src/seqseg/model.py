"""End-to-end recurrent segmenter: encoder + skip projections + decoder.

The image is encoded once; the decoder is then stepped over the fixed pyramid,
one object per step. ``unroll`` runs a fixed number of steps, ``infer`` stops
at the first step whose stop score drops below a threshold.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import ImageSample, InstancePrediction, PredictionSequence
from .decoder import Decoder, DecoderConfig, DecoderState, StepOutput
from .encoder import Encoder, EncoderConfig, Projection


def image_to_tensor(image, dtype=torch.float32, device=None) -> torch.Tensor:
    """(h, w, 3) ImageSample or array -> (1, 3, h, w) tensor."""
    pixels = image.pixels if isinstance(image, ImageSample) else image
    t = torch.as_tensor(pixels, dtype=dtype, device=device)
    return t.permute(2, 0, 1).unsqueeze(0)


class RecurrentSegmenter(nn.Module):
    """Maps an image to a sequence of (mask, box, class, stop) predictions."""

    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig):
        super().__init__()
        if decoder_cfg.num_layers > encoder_cfg.num_blocks:
            raise ValueError(
                f"decoder depth {decoder_cfg.num_layers} exceeds "
                f"encoder block count {encoder_cfg.num_blocks}"
            )
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.encoder = Encoder(encoder_cfg)
        self.decoder = Decoder(decoder_cfg)

        # One projection per consumed skip. Layer 0 always projects to its own
        # hidden width; upper layers project to the width their merge requires
        # (the hidden width for concat, the upsampled width for sum/mult) and
        # keep no projection at all when skips are disabled.
        pyramid_ch = encoder_cfg.pyramid_channels()
        hidden = decoder_cfg.hidden_channels()
        projections: dict[str, Projection] = {}
        for i in range(decoder_cfg.num_layers):
            if i == 0:
                target = hidden[0]
            elif decoder_cfg.skip_mode == "concat":
                target = hidden[i]
            elif decoder_cfg.skip_mode in ("sum", "mult"):
                target = hidden[i - 1]
            else:
                continue
            projections[str(i)] = Projection(pyramid_ch[i], target)
        self.projections = nn.ModuleDict(projections)

    def project_pyramid(self, pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        """Project the consumed pyramid levels; unused levels become None."""
        out = []
        for i in range(self.decoder_cfg.num_layers):
            key = str(i)
            out.append(self.projections[key](pyramid[i]) if key in self.projections else None)
        return out

    def init_state(self, projections: list[torch.Tensor]) -> DecoderState:
        return self.decoder.init_state(projections)

    def rollout(self, images: torch.Tensor, steps: int) -> list[StepOutput]:
        """Batched forward: encode once, decode ``steps`` times."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        pyramid = self.encoder(images)
        projections = self.project_pyramid(pyramid)
        state = self.init_state(projections)
        image_size = (images.shape[2], images.shape[3])
        outputs = []
        for _ in range(steps):
            step_out, state = self.decoder.step(projections, state, image_size)
            outputs.append(step_out)
        return outputs

    def unroll(self, image, steps: int) -> PredictionSequence:
        """Single-image fixed-length rollout as a PredictionSequence."""
        dtype = next(self.parameters()).dtype
        x = image if isinstance(image, torch.Tensor) else image_to_tensor(image, dtype=dtype)
        outputs = self.rollout(x, steps)
        return PredictionSequence([_to_prediction(o) for o in outputs])

    @torch.no_grad()
    def infer(self, image, stop_threshold: float = 0.5, max_steps: int = 10) -> PredictionSequence:
        """Decode until the stop score falls below the threshold (that step is
        dropped) or ``max_steps`` is reached. The retained prefix may be empty."""
        if not 0.0 < stop_threshold < 1.0:
            raise ValueError("stop_threshold must lie in (0, 1)")
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        dtype = next(self.parameters()).dtype
        x = image if isinstance(image, torch.Tensor) else image_to_tensor(image, dtype=dtype)
        pyramid = self.encoder(x)
        projections = self.project_pyramid(pyramid)
        state = self.init_state(projections)
        image_size = (x.shape[2], x.shape[3])
        kept = []
        for _ in range(max_steps):
            step_out, state = self.decoder.step(projections, state, image_size)
            if float(step_out.stop[0]) < stop_threshold:
                break
            kept.append(_to_prediction(step_out))
        return PredictionSequence(kept)


def _to_prediction(out: StepOutput, index: int = 0) -> InstancePrediction:
    return InstancePrediction(
        mask=out.mask[index],
        box=out.box[index],
        class_probs=out.class_probs[index],
        stop_score=out.stop[index],
    )


def batch_predictions(outputs: list[StepOutput], index: int) -> PredictionSequence:
    """Extract one image's sequence from a batched rollout."""
    return PredictionSequence([_to_prediction(o, index) for o in outputs])


def build_model(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
                seed: int = 0) -> RecurrentSegmenter:
    """Construct a model with seeded parameter initialization."""
    torch.manual_seed(seed)
    return RecurrentSegmenter(encoder_cfg, decoder_cfg)
