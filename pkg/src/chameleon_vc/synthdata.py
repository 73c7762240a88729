"""Parametric harmonic "speech" with known speaker and content labels.

Each speaker is a base F0, a jitter fraction and a vector of per-harmonic
gains. Each content symbol is a formant-like spectral pattern; an utterance
is a sequence of symbols with per-symbol durations and F0 offsets. Both
factors are therefore known exactly for every frame.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_HARMONICS = 24
ALPHABET_SIZE = 12
MAX_SECONDS = 10.0
OUTPUT_GAIN = 0.06
SPLITS = ("train", "dev", "test")
# Generated speakers stay in the upper part of the allowed [90, 300] Hz band so
# that pitch stays resolvable from 25 ms log-mel frames.
F0_RANGE = (150.0, 280.0)

# F1 x F2 grid; every symbol gets a distinct (F1, F2) pair.
_F1 = (280.0, 420.0, 630.0, 950.0)
_F2 = (1250.0, 1900.0, 2900.0)
FORMANTS = tuple((f1, f2) for f2 in _F2 for f1 in _F1)
FORMANT_WIDTH_OCT = 0.28
PATTERN_FLOOR = 0.2


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    base_f0: float
    envelope: tuple
    f0_jitter: float = 0.0

    def __post_init__(self):
        if not 90.0 <= self.base_f0 <= 300.0:
            raise ValueError(f"base_f0 {self.base_f0} outside [90, 300] Hz")
        if not 0.0 <= self.f0_jitter <= 0.05:
            raise ValueError(f"f0_jitter {self.f0_jitter} outside [0, 0.05]")
        env = np.asarray(self.envelope, dtype=float)
        if env.ndim != 1 or np.any(env < 0) or np.any(env > 1):
            raise ValueError("envelope gains must be a vector in [0, 1]")


@dataclass(frozen=True)
class ContentScript:
    symbols: tuple
    durations_ms: tuple
    f0_offsets: tuple

    def __post_init__(self):
        n = len(self.symbols)
        if n < 2:
            raise ValueError("a script needs at least 2 symbols")
        if len(self.durations_ms) != n or len(self.f0_offsets) != n:
            raise ValueError("symbols, durations and offsets must have equal length")
        if any(not 0 <= s < ALPHABET_SIZE for s in self.symbols):
            raise ValueError(f"symbols must lie in [0, {ALPHABET_SIZE})")
        if any(not 80 <= d <= 240 for d in self.durations_ms):
            raise ValueError("symbol durations must lie in [80, 240] ms")
        if any(not -4 <= o <= 4 for o in self.f0_offsets):
            raise ValueError("f0 offsets must lie in [-4, 4] semitones")

    @property
    def n_samples(self):
        return int(sum(round(d * SAMPLE_RATE / 1000) for d in self.durations_ms))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: int
    split: str
    symbols: tuple
    path: str


@dataclass
class CorpusManifest:
    entries: list
    root: Path = None
    speakers: dict = field(default_factory=dict)
    scripts: dict = field(default_factory=dict)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def speaker_ids(self, split=None):
        return sorted({e.speaker_id for e in self.entries if split is None or e.split == split})

    def load(self, entry):
        return read_wav(Path(self.root) / entry.path)

    def to_text(self):
        return "".join(
            f"{e.utt_id}\t{e.speaker_id}\t{e.split}\t{','.join(map(str, e.symbols))}\t{e.path}\n"
            for e in self.entries)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def symbol_pattern(symbol, freqs):
    """Formant gain of ``symbol`` evaluated at ``freqs`` (Hz), in (0, 1]."""
    f1, f2 = FORMANTS[symbol]
    lf = np.log2(np.maximum(freqs, 1.0))
    bumps = (np.exp(-0.5 * ((lf - np.log2(f1)) / FORMANT_WIDTH_OCT) ** 2)
             + 0.7 * np.exp(-0.5 * ((lf - np.log2(f2)) / FORMANT_WIDTH_OCT) ** 2))
    return PATTERN_FLOOR + (1 - PATTERN_FLOOR) * np.minimum(bumps, 1.0)


def _smooth(x, width):
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    padded = np.pad(x, (width // 2, width - 1 - width // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def symbol_track(script, sample_rate=SAMPLE_RATE):
    """Per-sample symbol index and F0 offset (semitones)."""
    lengths = [int(round(d * sample_rate / 1000)) for d in script.durations_ms]
    symbols = np.repeat(np.asarray(script.symbols, dtype=int), lengths)
    offsets = np.repeat(np.asarray(script.f0_offsets, dtype=float), lengths)
    return symbols, offsets


def synthesize_utterance(spk, script, seed):
    """Render an additive-harmonic waveform for one (speaker, script) pair."""
    n = script.n_samples
    if n > MAX_SECONDS * SAMPLE_RATE:
        raise ValueError(f"duration overflow: {n / SAMPLE_RATE:.2f} s > {MAX_SECONDS} s")
    rng = np.random.default_rng(seed)
    envelope = np.asarray(spk.envelope, dtype=float)
    symbols, offsets = symbol_track(script)

    f0 = spk.base_f0 * 2.0 ** (_smooth(offsets, 160) / 12.0)
    if spk.f0_jitter > 0:
        wobble = _smooth(rng.standard_normal(n), 400)
        wobble /= max(np.abs(wobble).max(), 1e-12)
        f0 = f0 * (1.0 + spk.f0_jitter * wobble)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    out = np.zeros(n)
    for h in range(1, len(envelope) + 1):
        if envelope[h - 1] == 0:
            continue
        freq = h * f0
        amp = np.zeros(n)
        for k in np.unique(symbols):
            idx = symbols == k
            amp[idx] = symbol_pattern(k, freq[idx])
        amp = _smooth(amp, 160) * envelope[h - 1] * (freq < 0.49 * SAMPLE_RATE)
        out += amp * np.sin(h * phase)
    return Waveform(np.clip(OUTPUT_GAIN * out, -1.0, 1.0))


def frame_symbols(script, n_frames, hop=160, window=400):
    """Ground-truth symbol of each analysis frame (by frame centre)."""
    symbols, offsets = symbol_track(script)
    centres = np.minimum(np.arange(n_frames) * hop + window // 2, len(symbols) - 1)
    return symbols[centres], offsets[centres]


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def _envelope(rng):
    """Spectral tilt times one broad resonance, over harmonic number."""
    h = np.arange(1, N_HARMONICS + 1)
    tilt = rng.uniform(0.0, 1.5)
    centre, width = rng.uniform(1, 18), rng.uniform(2.5, 6)
    env = h ** (-tilt) * (1 + rng.uniform(0.5, 3.0) * np.exp(-0.5 * ((h - centre) / width) ** 2))
    return np.round(env / env.max(), 6)


def make_speakers(n_speakers, seed, n_held_out=0, max_tries=1000):
    """Draw speaker specs whose envelopes differ pairwise by >= 0.1 somewhere.

    Base F0s sit on a log-spaced grid in random order. The last
    ``n_held_out`` speakers never take the two extreme grid points, so the
    pitch of held-out voices stays inside the range seen in training.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    grid = np.exp(np.linspace(np.log(F0_RANGE[0]), np.log(F0_RANGE[1]), n_speakers))
    if n_held_out > max(0, n_speakers - 2):
        raise ValueError("too many held-out speakers for an interior pitch grid")
    held = rng.choice(np.arange(1, n_speakers - 1), size=n_held_out, replace=False) if n_held_out else []
    rest = rng.permutation(np.setdiff1d(np.arange(n_speakers), held))
    f0s = grid[np.r_[rest, held].astype(int)]
    speakers = []
    for sid in range(n_speakers):
        for _ in range(max_tries):
            env = _envelope(rng)
            if all(np.abs(env - np.asarray(s.envelope)).max() >= 0.1 for s in speakers):
                break
        else:
            raise RuntimeError("could not draw a distinct speaker envelope")
        f0 = float(np.clip(f0s[sid] * rng.uniform(0.97, 1.03), 90, 300))
        speakers.append(SpeakerSpec(sid, round(f0, 3), tuple(env), round(float(rng.uniform(0, 0.02)), 4)))
    return speakers


def make_script(rng, n_symbols=None):
    n = int(n_symbols or rng.integers(8, 13))
    symbols = [int(rng.integers(ALPHABET_SIZE))]
    while len(symbols) < n:
        s = int(rng.integers(ALPHABET_SIZE))
        if s != symbols[-1]:
            symbols.append(s)
    durations = [int(rng.integers(80, 241)) for _ in range(n)]
    offsets = [round(float(rng.uniform(-4, 4)), 3) for _ in range(n)]
    return ContentScript(tuple(symbols), tuple(durations), tuple(offsets))


def generate_corpus(n_speakers, n_utts_per_speaker, seed, out_dir=None):
    """Build a speaker-disjoint corpus; with ``out_dir`` also write it to disk.

    The last ``max(1, n_speakers // 4)`` speakers form the test split. For
    the remaining speakers the last utterance goes to dev when a speaker
    has at least 3 utterances.
    """
    if n_speakers < 4:
        raise ValueError("generate_corpus needs at least 4 speakers")
    n_test = max(1, n_speakers // 4)
    speakers = make_speakers(n_speakers, seed, n_test)
    entries, scripts = [], {}
    for spk in speakers:
        held_out = spk.speaker_id >= n_speakers - n_test
        for k in range(n_utts_per_speaker):
            rng = np.random.default_rng([seed, spk.speaker_id, k])
            script = make_script(rng)
            utt = f"spk{spk.speaker_id:02d}_utt{k:02d}"
            if held_out:
                split = "test"
            elif n_utts_per_speaker >= 3 and k == n_utts_per_speaker - 1:
                split = "dev"
            else:
                split = "train"
            entries.append(ManifestEntry(utt, spk.speaker_id, split, script.symbols, f"wavs/{utt}.wav"))
            scripts[utt] = script
    manifest = CorpusManifest(entries, Path(out_dir) if out_dir else None,
                              {s.speaker_id: s for s in speakers}, scripts)
    if out_dir is not None:
        write_corpus(manifest, seed)
    return manifest


def utterance_seed(seed, utt_id):
    spk, utt = utt_id.split("_")
    return [seed, int(spk[3:]), int(utt[3:]), 1]


def render(manifest, entry, seed):
    return synthesize_utterance(manifest.speakers[entry.speaker_id], manifest.scripts[entry.utt_id],
                                utterance_seed(seed, entry.utt_id))


def write_corpus(manifest, seed):
    root = Path(manifest.root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        write_wav(render(manifest, entry, seed), root / entry.path)
    (root / "manifest.tsv").write_text(manifest.to_text(), encoding="utf-8")
    truth = {
        "seed": seed,
        "speakers": {str(s.speaker_id): {"base_f0": s.base_f0, "envelope": list(s.envelope),
                                         "f0_jitter": s.f0_jitter}
                     for s in manifest.speakers.values()},
        "scripts": {u: {"symbols": list(s.symbols), "durations_ms": list(s.durations_ms),
                        "f0_offsets": list(s.f0_offsets)} for u, s in manifest.scripts.items()},
    }
    (root / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True), encoding="utf-8")


def read_manifest(path):
    """Load ``manifest.tsv`` plus the ``truth.json`` sidecar next to it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[2] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: malformed manifest record")
        symbols = tuple(int(s) for s in parts[3].split(",")) if parts[3] else ()
        entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2], symbols, parts[4]))
    speakers, scripts = {}, {}
    truth_path = path.parent / "truth.json"
    if truth_path.exists():
        truth = json.loads(truth_path.read_text(encoding="utf-8"))
        for sid, s in truth["speakers"].items():
            speakers[int(sid)] = SpeakerSpec(int(sid), s["base_f0"], tuple(s["envelope"]), s["f0_jitter"])
        for u, s in truth["scripts"].items():
            scripts[u] = ContentScript(tuple(s["symbols"]), tuple(s["durations_ms"]), tuple(s["f0_offsets"]))
    return CorpusManifest(entries, path.parent, speakers, scripts)


# ---------------------------------------------------------------------------
# WAV I/O (PCM 16-bit mono)
# ---------------------------------------------------------------------------

_PCM_SCALE = 32767.0


def write_wav(wave_obj, path):
    samples = np.asarray(wave_obj.samples, dtype=float)
    if samples.size and (samples.min() < -1 or samples.max() > 1):
        raise ValueError("samples must lie in [-1, 1]")
    pcm = np.round(samples * _PCM_SCALE).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wave_obj.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        if "unknown format" in str(exc):
            raise WavError(f"{path}: unsupported encoding") from exc
        raise WavError(f"{path}: malformed header") from exc
    if channels != 1 or width != 2:
        raise WavError(f"{path}: unsupported encoding ({channels} channels, {8 * width}-bit)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _PCM_SCALE, rate)
