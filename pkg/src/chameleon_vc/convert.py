"""Zero-shot conversion: content from the source, speaker from the target."""

from __future__ import annotations

import numpy as np

from . import frontend, synthdata
from .mixer import MixerConfig
from .trainer import VCModel, load_checkpoint


class CheckpointMismatchError(ValueError):
    pass


def _model(checkpoint):
    return checkpoint if isinstance(checkpoint, VCModel) else load_checkpoint(checkpoint)


def check_mixer(model, mixer_cfg):
    if mixer_cfg is None:
        return
    if not isinstance(mixer_cfg, MixerConfig):
        mixer_cfg = MixerConfig(*mixer_cfg)
    if mixer_cfg != model.mixer_cfg:
        raise CheckpointMismatchError(
            f"checkpoint was trained with {model.mixer_cfg}, requested {mixer_cfg}")


def convert_states(model, states, speaker):
    """Decode a source hidden-state stack with a target speaker embedding.

    This is exactly the reconstruction path of training, so passing the
    source's own embedding reproduces its training-time reconstruction.
    The adversarial extractor is never evaluated here.
    """
    out = model.decoder(model.content(states), np.asarray(speaker, float))
    return frontend.MelSpectrogram(out.data)


def convert(source, target, checkpoint, mixer_cfg=None, source_truth=None):
    """Convert ``source`` to the voice of ``target``; returns a log-mel spectrogram.

    ``checkpoint`` is a checkpoint directory or a loaded :class:`VCModel`.
    ``source_truth`` ``(speaker_id, script)`` is only needed by models built
    on the structured (ground-truth) encoder.
    """
    model = _model(checkpoint)
    check_mixer(model, mixer_cfg)
    src_mel = frontend.mel_spectrogram(source)
    speaker_id, script = source_truth if source_truth is not None else (None, None)
    states = model.encode(src_mel, speaker_id, script).states
    speaker = model.speaker_encoder.embed_mel(frontend.mel_spectrogram(target))
    return convert_states(model, states, speaker)


def resynthesize(mel, f0=None, default_f0=150.0, n_harmonics=40):
    """Rough sinusoidal overlap-add rendering of a log-mel spectrogram.

    For listening checks only. Harmonic amplitudes are read off the mel
    envelope at each harmonic frequency; ``f0`` (a :class:`PitchContour`)
    sets the pitch per frame, unvoiced frames use ``default_f0``.
    """
    frames = mel.frames if isinstance(mel, frontend.MelSpectrogram) else np.asarray(mel)
    n_frames = len(frames)
    hop, win = frontend.HOP, frontend.WINDOW
    centres = frontend.mel_centres()
    fb_norm = frontend.mel_filterbank().sum(axis=1)
    pitch = np.full(n_frames, default_f0)
    if f0 is not None:
        pitch = np.where(f0.voiced, f0.f0, default_f0)
    out = np.zeros(hop * (n_frames - 1) + win)
    window = np.hanning(win + 1)[:-1]
    t = np.arange(win) / frontend.SAMPLE_RATE
    phase = np.zeros(n_harmonics)
    for i in range(n_frames):
        freqs = pitch[i] * np.arange(1, n_harmonics + 1)
        ok = freqs < frontend.SAMPLE_RATE / 2
        power = np.exp(frames[i]) / np.maximum(fb_norm, 1e-12)
        amp = np.sqrt(np.interp(freqs, centres, power, left=power[0], right=0.0)) * ok
        seg = (amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phase[:, None])).sum(axis=0)
        out[i * hop:i * hop + win] += window * seg
        phase = (phase + 2 * np.pi * freqs * hop / frontend.SAMPLE_RATE) % (2 * np.pi)
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.9 / peak
    return synthdata.Waveform(out)
