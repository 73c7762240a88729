"""Per-frame decoder: content features + speaker embedding -> log-mel frames.

Stands in for a neural vocoder: it predicts the 40-band log-mel target
rather than a waveform. There is no temporal mixing, so output frame t
depends only on content frame t and the speaker embedding.
"""

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .layers import LayerNorm, Linear

GROUP = "decoder"


@dataclass(frozen=True)
class DecoderConfig:
    content_dim: int = 32
    speaker_dim: int = 16
    hidden_dim: int = 64
    blocks: int = 3
    n_mels: int = 40


class Decoder:
    def __init__(self, store, cfg, rng, prefix="decoder"):
        self.cfg = cfg
        h = cfg.hidden_dim
        self.inp = Linear(store, f"{prefix}.in", cfg.content_dim + cfg.speaker_dim, h, GROUP, rng)
        self.blocks = []
        for i in range(cfg.blocks):
            self.blocks.append((LayerNorm(store, f"{prefix}.block{i}.ln", h, GROUP),
                                Linear(store, f"{prefix}.block{i}.ff1", h, h, GROUP, rng),
                                Linear(store, f"{prefix}.block{i}.ff2", h, h, GROUP, rng, gain=0.5)))
        self.norm = LayerNorm(store, f"{prefix}.norm", h, GROUP)
        self.out = Linear(store, f"{prefix}.out", h, cfg.n_mels, GROUP, rng)

    def __call__(self, c, s):
        """``c``: ``[B, T, D]``, ``s``: ``[B, E]`` -> predicted log-mel ``[B, T, M]``.

        Unbatched ``[T, D]`` / ``[E]`` inputs give ``[T, M]``.
        """
        c, s = tc.as_tensor(c), tc.as_tensor(s)
        squeeze = c.ndim == 2
        if squeeze:
            c, s = tc.reshape(c, (1,) + c.shape), tc.reshape(s, (1,) + s.shape)
        b, t, d = c.shape
        if d != self.cfg.content_dim or s.shape != (b, self.cfg.speaker_dim):
            raise tc.ShapeError(f"decoder inputs mismatch: content {c.shape}, speaker {s.shape}")
        s_frames = tc.broadcast_to(tc.reshape(s, (b, 1, self.cfg.speaker_dim)), (b, t, self.cfg.speaker_dim))
        h = self.inp(tc.concat([c, s_frames], axis=-1))
        for ln, ff1, ff2 in self.blocks:
            h = h + ff2(tc.gelu(ff1(ln(h))))
        out = self.out(self.norm(h))
        return tc.reshape(out, (t, self.cfg.n_mels)) if squeeze else out


def decode(c, s, decoder):
    return decoder(c, s)
