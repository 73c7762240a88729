"""Log-mel features and autocorrelation pitch tracking.

Both analyses share one framing: 400-sample (25 ms) windows every 160
samples (10 ms) at 16 kHz, so mel frames, encoder frames and pitch frames
align by index.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import butter, sosfiltfilt

SAMPLE_RATE = 16000
N_MELS = 40
N_FFT = 512
HOP = 160
WINDOW = 400
LOG_FLOOR = 1e-8
F0_MIN = 70.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.5
RMS_GATE = 1e-4
LOWPASS_HZ = 1000.0
OCTAVE_TOLERANCE = 0.85


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, M] natural-log energies
    hop: int = HOP
    window: int = WINDOW

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class PitchContour:
    f0: np.ndarray  # [T] Hz, 0 where unvoiced
    voiced: np.ndarray  # [T] bool

    def __len__(self):
        return len(self.f0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _filterbank_cached(n_mels, n_fft, sample_rate):
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, centre, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (centre - lo)
        falling = (hi - freqs) / (hi - centre)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` spanning 0 to Nyquist."""
    return _filterbank_cached(n_mels, n_fft, sample_rate)


def mel_centres(n_mels=N_MELS, sample_rate=SAMPLE_RATE):
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def frame_count(n_samples, window=WINDOW, hop=HOP):
    return (n_samples - window) // hop + 1


def frames_of(samples, window=WINDOW, hop=HOP):
    n = frame_count(len(samples), window, hop)
    if n < 1:
        raise ValueError(f"waveform shorter than one window ({len(samples)} < {window} samples)")
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def _check_rate(wave):
    if wave.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {wave.sample_rate}")


def power_spectrum(frames):
    win = np.hanning(frames.shape[1] + 1)[:-1]
    return np.abs(np.fft.rfft(frames * win, n=N_FFT)) ** 2


def mel_spectrogram(wave):
    _check_rate(wave)
    spec = power_spectrum(frames_of(np.asarray(wave.samples, dtype=float)))
    energies = spec @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(energies, LOG_FLOOR)))


def _parabolic(y_prev, y0, y_next):
    denom = y_prev - 2 * y0 + y_next
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (y_prev - y_next) / denom, -0.5, 0.5))


def _pick_lag(r, lags):
    """Index into ``r`` (padded by one lag on each side) of the chosen period."""
    i = int(np.argmax(r[1:-1])) + 1
    best = r[i]
    for k in (4, 3, 2):
        centre = int(round(lags[i] / k)) - lags[0]
        lo, hi = max(1, centre - 2), min(len(r) - 2, centre + 2)
        if lo > hi:
            continue
        j = lo + int(np.argmax(r[lo:hi + 1]))
        if r[j] >= r[j - 1] and r[j] >= r[j + 1] and r[j] >= OCTAVE_TOLERANCE * best:
            return j
    return i


@lru_cache(maxsize=None)
def _lowpass():
    return butter(4, LOWPASS_HZ, btype="low", fs=SAMPLE_RATE, output="sos")


def estimate_f0(wave, threshold=VOICING_THRESHOLD, rms_gate=RMS_GATE,
                fmin=F0_MIN, fmax=F0_MAX):
    """Frame-wise pitch by normalised autocorrelation.

    The signal is low-passed at 1 kHz first so that strong upper harmonics
    do not make integer-lag sampling of the correlation miss the period.
    The best lag is the global correlation maximum, replaced by the peak
    near one of its sub-multiples (1/2, 1/3, 1/4) when that peak reaches 85%
    of the maximum; this suppresses period-doubling errors. The RMS gate
    applies to the unfiltered frame.
    """
    _check_rate(wave)
    samples = np.asarray(wave.samples, dtype=float)
    raw_frames = frames_of(samples)
    if len(samples) > 30:
        samples = sosfiltfilt(_lowpass(), samples)
    frames = frames_of(samples)
    n_frames, width = frames.shape
    lag_min = int(np.floor(SAMPLE_RATE / fmax))
    lag_max = int(np.ceil(SAMPLE_RATE / fmin))
    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    lags = np.arange(lag_min - 1, lag_max + 2)
    for t, frame in enumerate(frames):
        if np.sqrt(np.mean(raw_frames[t] ** 2)) < rms_gate:
            continue
        x = frame - frame.mean()
        r = np.empty(len(lags))
        for i, lag in enumerate(lags):
            a, b = x[:width - lag], x[lag:]
            den = np.sqrt(np.dot(a, a) * np.dot(b, b))
            r[i] = np.dot(a, b) / den if den > 0 else 0.0
        if r[1:-1].max() < threshold:
            continue
        i = _pick_lag(r, lags)
        lag = lags[i] + _parabolic(r[i - 1], r[i], r[i + 1])
        f0[t] = SAMPLE_RATE / lag
        voiced[t] = True
    return PitchContour(f0, voiced)


@lru_cache(maxsize=None)
def _harmonic_templates(fmin, fmax, steps_per_octave=48):
    """Detrended log-mel patterns of flat harmonic combs on a log-F0 grid."""
    grid = fmin * 2.0 ** (np.arange(int(np.log2(fmax / fmin) * steps_per_octave) + 1) / steps_per_octave)
    t = np.arange(WINDOW) / SAMPLE_RATE
    frames = np.zeros((len(grid), WINDOW))
    for i, f in enumerate(grid):
        for h in range(1, int(4000 // f) + 1):
            frames[i] += np.sin(2 * np.pi * h * f * t)
    logmel = np.log(np.maximum(power_spectrum(frames) @ mel_filterbank().T, LOG_FLOOR))
    tmpl = _fine_structure(logmel)
    tmpl /= np.linalg.norm(tmpl, axis=1, keepdims=True)
    tmpl.setflags(write=False)
    return grid, tmpl


_FINE_BINS = 24  # mel bins below ~2.3 kHz carry resolved harmonics


def _fine_structure(logmel):
    x = logmel[:, :_FINE_BINS]
    kernel = np.ones(5) / 5
    padded = np.pad(x, ((0, 0), (2, 2)), mode="edge")
    trend = np.stack([np.convolve(row, kernel, mode="valid") for row in padded])
    fine = x - trend
    return fine - fine.mean(axis=1, keepdims=True)


def estimate_f0_mel(mel, threshold=0.5, fmin=F0_MIN, fmax=F0_MAX):
    """Pitch from a log-mel spectrogram by harmonic-template matching.

    Used where no waveform exists (decoder outputs). Each frame's fine
    spectral structure is correlated with comb templates; the best match
    above ``threshold`` is voiced.
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    grid, tmpl = _harmonic_templates(float(fmin), float(fmax))
    fine = _fine_structure(frames)
    norms = np.linalg.norm(fine, axis=1)
    scores = (fine @ tmpl.T) / np.maximum(norms, 1e-12)[:, None]
    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    log_grid = np.log2(grid)
    step = log_grid[1] - log_grid[0]
    for t in range(len(frames)):
        if norms[t] < 1e-6:
            continue
        i = int(np.argmax(scores[t]))
        if scores[t, i] < threshold:
            continue
        delta = 0.0
        if 0 < i < len(grid) - 1:
            delta = _parabolic(scores[t, i - 1], scores[t, i], scores[t, i + 1])
        f0[t] = 2.0 ** (log_grid[i] + delta * step)
        voiced[t] = True
    return PitchContour(f0, voiced)


def dump_matrix(path, matrix):
    """Write a text matrix, one frame per line."""
    np.savetxt(path, np.atleast_2d(matrix), fmt="%.10g")


def load_matrix(path):
    return np.atleast_2d(np.loadtxt(path))
