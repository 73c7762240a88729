"""Adversarial speaker extractor.

A transformer encoder over content frames with a learned CLS vector
prepended and no positional information at all, so its output is invariant
to any permutation of the frames. The final CLS state is projected to the
speaker-embedding size.
"""

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .layers import LayerNorm, Linear, TransformerBlock

GROUP = "speaker_extractor"


@dataclass(frozen=True)
class ExtractorConfig:
    model_dim: int = 32
    speaker_dim: int = 16
    blocks: int = 2
    heads: int = 2


class SpeakerExtractor:
    def __init__(self, store, cfg, rng, prefix="extractor"):
        self.cfg = cfg
        d = cfg.model_dim
        self.cls = store.create(f"{prefix}.cls", 0.02 * rng.standard_normal(d), GROUP)
        self.blocks = [TransformerBlock(store, f"{prefix}.block{i}", d, cfg.heads, 4 * d, GROUP, rng)
                       for i in range(cfg.blocks)]
        self.norm = LayerNorm(store, f"{prefix}.norm", d, GROUP)
        self.proj = Linear(store, f"{prefix}.proj", d, cfg.speaker_dim, GROUP, rng)

    def __call__(self, c):
        """``c``: content features ``[B, T, D]`` (or ``[T, D]``); returns ``[B, E]`` (or ``[E]``)."""
        c = tc.as_tensor(c)
        squeeze = c.ndim == 2
        if squeeze:
            c = tc.reshape(c, (1,) + c.shape)
        b, t, d = c.shape
        if d != self.cfg.model_dim:
            raise tc.ShapeError(f"extractor expects dim {self.cfg.model_dim}, got {d}")
        if t < 1:
            raise tc.ShapeError("extractor needs at least one frame")
        cls = tc.broadcast_to(tc.reshape(self.cls, (1, 1, d)), (b, 1, d))
        x = tc.concat([cls, c], axis=1)
        for block in self.blocks:
            x = block(x)
        out = self.proj(self.norm(tc.take(x, 0, axis=1)))
        return tc.reshape(out, (self.cfg.speaker_dim,)) if squeeze else out


def extract_speaker(c, extractor):
    return extractor(c)
