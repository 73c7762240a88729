"""Frozen feature extractors.

``ContentEncoder`` is a small random transformer that exposes every hidden
state, standing in for a self-supervised speech model. ``SpeakerEncoder``
maps the long-term average spectrum to a unit vector. ``structured_encode``
builds hidden-state stacks with known per-layer content/speaker gains, used
as a controlled fixture.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import frontend, synthdata
from . import tensorcore as tc
from .layers import Linear, TransformerBlock

N_LAYERS = 6
HIDDEN_DIM = 32
SPEAKER_DIM = 16
ENCODER_HEADS = 2
DISTANCE_SLOPES = (1.0, 0.25)


@dataclass
class HiddenStateStack:
    states: np.ndarray  # [L+1, T, D]

    @property
    def n_layers(self):
        return self.states.shape[0] - 1

    @property
    def n_frames(self):
        return self.states.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]


class ContentEncoder:
    """Mel frontend -> linear projection (layer 0) -> L frozen transformer blocks.

    Attention heads carry a fixed distance penalty (see
    :class:`~chameleon_vc.layers.SelfAttention`) standing in for the
    relative position machinery of real speech encoders; without it random
    attention averages over the whole utterance and deep layers lose the
    frame-level content.
    """

    def __init__(self, seed, n_layers=N_LAYERS, dim=HIDDEN_DIM, heads=ENCODER_HEADS,
                 distance_slopes=DISTANCE_SLOPES):
        rng = np.random.default_rng([seed, 0xC0])
        self.seed = seed
        self.params = tc.ParamStore()
        self.proj = Linear(self.params, "content_encoder.proj", frontend.N_MELS, dim, "frozen", rng)
        self.blocks = [TransformerBlock(self.params, f"content_encoder.block{i}", dim, heads, 4 * dim,
                                        "frozen", rng, distance_slopes)
                       for i in range(n_layers)]

    def encode_mel(self, mel):
        frames = mel.frames if isinstance(mel, frontend.MelSpectrogram) else np.asarray(mel)
        x = self.proj(tc.layer_norm(frames[None]))
        states = [x.data[0]]
        for block in self.blocks:
            x = block(x)
            states.append(x.data[0])
        return HiddenStateStack(np.stack(states))

    def __call__(self, wave):
        return self.encode_mel(frontend.mel_spectrogram(wave))


def random_frozen_encode(wave, seed):
    return ContentEncoder(seed)(wave)


@lru_cache(maxsize=1)
def neutral_reference_spectrum():
    """Long-term average log-mel of a neutral voice reading every symbol once.

    Neutral means 200 Hz, no jitter, and a mid-range spectral tilt; the
    speaker encoder measures each utterance relative to this spectrum.
    """
    h = np.arange(1, synthdata.N_HARMONICS + 1)
    spk = synthdata.SpeakerSpec(-1, 200.0, tuple(h ** -0.75), 0.0)
    n = synthdata.ALPHABET_SIZE
    script = synthdata.ContentScript(tuple(range(n)), (160,) * n, (0.0,) * n)
    ref = frontend.mel_spectrogram(synthdata.synthesize_utterance(spk, script, 0)).frames.mean(axis=0)
    ref.setflags(write=False)
    return ref


class SpeakerEncoder:
    """Long-term average log-mel -> frozen affine map -> L2 normalisation.

    The affine map is a random projection whose bias cancels the neutral
    reference spectrum, so embeddings encode deviations from a neutral voice.
    """

    def __init__(self, seed, dim=SPEAKER_DIM):
        rng = np.random.default_rng([seed, 0x5E])
        self.params = tc.ParamStore()
        weight = rng.standard_normal((frontend.N_MELS, dim)) / np.sqrt(frontend.N_MELS)
        self.weight = self.params.create("speaker_encoder.weight", weight, "frozen")
        self.bias = self.params.create("speaker_encoder.bias", -neutral_reference_spectrum() @ weight, "frozen")

    def embed_mel(self, mel):
        frames = mel.frames if isinstance(mel, frontend.MelSpectrogram) else np.asarray(mel)
        e = frames.mean(axis=0) @ self.weight.data + self.bias.data
        norm = np.linalg.norm(e)
        if norm == 0:
            raise ValueError("speaker embedding is degenerate (zero vector)")
        return e / norm

    def __call__(self, wave):
        return self.embed_mel(frontend.mel_spectrogram(wave))


def frozen_speaker_encode(wave, seed):
    return SpeakerEncoder(seed)(wave)


@dataclass
class StructuredEncoderProfile:
    alpha: tuple  # content gain per layer
    beta: tuple  # speaker gain per layer
    noise_sigma: float = 0.0

    def __post_init__(self):
        a, b = np.asarray(self.alpha, float), np.asarray(self.beta, float)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("alpha and beta must be vectors of equal length")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (np.any((a >= 0.5) & (np.abs(b) < 1e-6)) and np.any((b >= 0.5) & (np.abs(a) < 1e-6))):
            raise ValueError("profile needs a pure-content layer and a pure-speaker layer")

    @property
    def n_layers(self):
        return len(self.alpha) - 1


def default_profile(noise_sigma=0.1):
    """Speaker in layers 0-2, content in layers 4-6, layer 3 mixed."""
    return StructuredEncoderProfile(alpha=(0, 0, 0, 0.5, 1, 1, 1), beta=(1, 1, 1, 0.5, 0, 0, 0),
                                    noise_sigma=noise_sigma)


def structured_encode(wave, truth, profile, seed):
    """Layer l = alpha[l] * content + beta[l] * speaker + noise_sigma * N(0, 1).

    ``truth`` is ``(speaker_features, content_features)``, both ``[T, D]``.
    ``wave`` only fixes the expected frame count; it may be ``None``.
    """
    speaker, content = (np.asarray(x, dtype=float) for x in truth)
    if speaker.shape != content.shape or speaker.ndim != 2:
        raise ValueError(f"truth shape mismatch: {speaker.shape} vs {content.shape}")
    if wave is not None:
        n = frontend.frame_count(len(wave.samples))
        if n != speaker.shape[0]:
            raise ValueError(f"truth has {speaker.shape[0]} frames, waveform has {n}")
    rng = np.random.default_rng(seed)
    alpha = np.asarray(profile.alpha, float)[:, None, None]
    beta = np.asarray(profile.beta, float)[:, None, None]
    states = alpha * content[None] + beta * speaker[None]
    if profile.noise_sigma > 0:
        states = states + profile.noise_sigma * rng.standard_normal(states.shape)
    return HiddenStateStack(states)


class TruthFeatures:
    """Random but fixed speaker vectors and symbol/prosody embeddings.

    Speaker features are one vector per speaker repeated over frames.
    Content features mix the frame's symbol embedding with an embedding of
    the (previous symbol, symbol) pair, so that utterance averages of content
    spread over every dimension rather than a 12-dimensional subspace, plus
    the frame's F0 offset (semitones / 4) along a fixed prosody direction.
    """

    def __init__(self, seed, dim=HIDDEN_DIM, n_symbols=12):
        rng = np.random.default_rng([seed, 0x7F])
        self.dim = dim
        self.n_symbols = n_symbols
        self.symbol_table = rng.standard_normal((n_symbols, dim))
        self.context_table = rng.standard_normal((n_symbols + 1, n_symbols, dim))
        self.prosody = rng.standard_normal(dim) / np.sqrt(dim) * 2.0
        self.seed = seed

    def speaker_vector(self, speaker_id):
        return np.random.default_rng([self.seed, 0x5B, speaker_id]).standard_normal(self.dim)

    def previous_symbols(self, frame_symbols):
        """Per frame, the symbol of the preceding segment (``n_symbols`` at the start)."""
        syms = np.asarray(frame_symbols)
        prev = np.full(len(syms), self.n_symbols)
        change = np.flatnonzero(np.diff(syms)) + 1
        for a, b in zip(change, np.r_[change[1:], len(syms)]):
            prev[a:b] = syms[a - 1]
        return prev

    def __call__(self, speaker_id, frame_symbols, frame_offsets):
        syms = np.asarray(frame_symbols)
        speaker = np.tile(self.speaker_vector(speaker_id), (len(syms), 1))
        ctx = self.context_table[self.previous_symbols(syms), syms]
        content = (self.symbol_table[syms] + ctx) / np.sqrt(2.0)
        content = content + np.outer(np.asarray(frame_offsets) / 4.0, self.prosody)
        return speaker, content


def dump_stack(path, stack, prefix="layer"):
    """Write a hidden-state stack in the checkpoint container format."""
    tc.save_container(path, {f"{prefix}{i}": s for i, s in enumerate(stack.states)})


def load_stack(path, prefix="layer"):
    arrays = tc.load_container(path)
    return HiddenStateStack(np.stack([arrays[f"{prefix}{i}"] for i in range(len(arrays))]))
