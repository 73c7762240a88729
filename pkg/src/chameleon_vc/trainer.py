"""Reconstruction training with an adversarial, gradient-reversed speaker loss.

The logged generator loss is ``recon + lam * l2`` where ``recon`` is the L1
log-mel reconstruction error and ``l2`` the squared distance between the
frozen speaker embedding and the extractor's prediction from the content
features. The extractor reads the content features through a reversal node
of strength ``lam`` and the graph is differentiated once, so:

* extractor parameters receive ``+dl2`` (they learn to predict the speaker)
* layer-weight logits receive ``drecon - lam * dl2`` (they hide the speaker)
* decoder parameters receive ``drecon`` only (the l2 path never reaches them)
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import encoders, frontend, synthdata
from . import tensorcore as tc
from .decoder import Decoder, DecoderConfig
from .extractor import ExtractorConfig, SpeakerExtractor
from .mixer import LayerWeights, MixerConfig, mix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "chameleon"
    layer_range: tuple = (4, 6)
    encoder: str = "random"  # "random" or "structured"
    encoder_seed: int = 0
    n_layers: int = encoders.N_LAYERS
    dim: int = encoders.HIDDEN_DIM
    speaker_dim: int = encoders.SPEAKER_DIM
    noise_sigma: float = 0.1
    extractor_blocks: int = 2
    extractor_heads: int = 2
    decoder_hidden: int = 64
    decoder_blocks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ("random", "structured"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "structured" and self.n_layers != 6:
            raise ValueError("the structured encoder profile has 7 layers (n_layers=6)")
        self.mixer()

    def mixer(self):
        rng = tuple(self.layer_range) if self.mode == "fixed_average" else None
        return MixerConfig(self.mode, rng)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    learning_rate: float = 0.02
    momentum: float = 0.9
    lambda_l2: float = 2.0
    lambda_warmup_steps: int = 100
    layer_weights_lr_scale: float = 50.0
    extractor_lr_scale: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_l2 < 0 or not np.isfinite(self.lambda_l2):
            raise ValueError("lambda_l2 must be finite and >= 0")
        if self.lambda_warmup_steps < 0:
            raise ValueError("lambda_warmup_steps must be >= 0")

    def effective_lambda(self, step):
        if self.lambda_warmup_steps == 0:
            return self.lambda_l2
        return self.lambda_l2 * min(1.0, step / self.lambda_warmup_steps)


@dataclass
class LossBreakdown:
    recon: float
    l2: float
    lam: float

    @property
    def total(self):
        return self.recon + self.lam * self.l2

    def line(self, step):
        return f"{step}\t{self.recon:.12g}\t{self.l2:.12g}\t{self.lam:.12g}\t{self.total:.12g}"


@dataclass
class Example:
    utt_id: str
    speaker_id: int
    split: str
    states: np.ndarray  # [L+1, T, D]
    speaker: np.ndarray  # [E]
    target: np.ndarray  # [T, M]
    frame_symbols: np.ndarray = field(default=None, repr=False)
    frame_offsets: np.ndarray = field(default=None, repr=False)


class VCModel:
    """Frozen encoders plus the trainable mixer, extractor and decoder."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.mixer_cfg = cfg.mixer()
        self.params = tc.ParamStore()
        rng = np.random.default_rng([cfg.seed, 0xA1])
        self.speaker_encoder = encoders.SpeakerEncoder(cfg.encoder_seed, cfg.speaker_dim)
        self.params.update(self.speaker_encoder.params)
        if cfg.encoder == "random":
            self.content_encoder = encoders.ContentEncoder(cfg.encoder_seed, cfg.n_layers, cfg.dim)
            self.params.update(self.content_encoder.params)
        else:
            self.content_encoder = None
            self.truth = encoders.TruthFeatures(cfg.encoder_seed, cfg.dim)
            self.profile = encoders.default_profile(cfg.noise_sigma)
        self.weights = self.extractor = None
        if cfg.mode == "chameleon":
            self.weights = LayerWeights(self.params, cfg.n_layers, cfg.dim)
            self.extractor = SpeakerExtractor(
                self.params, ExtractorConfig(cfg.dim, cfg.speaker_dim, cfg.extractor_blocks, cfg.extractor_heads),
                rng)
        self.decoder = Decoder(self.params, DecoderConfig(cfg.dim, cfg.speaker_dim, cfg.decoder_hidden,
                                                          cfg.decoder_blocks, frontend.N_MELS), rng)

    # -- encoding ---------------------------------------------------------

    def encode(self, mel, speaker_id=None, script=None, noise_seed=0):
        """Hidden-state stack for one utterance.

        The structured encoder needs the ground truth (speaker id + script).
        """
        if self.content_encoder is not None:
            return self.content_encoder.encode_mel(mel)
        if script is None:
            raise ValueError("the structured encoder needs the utterance script")
        syms, offs = synthdata.frame_symbols(script, mel.n_frames)
        truth = self.truth(speaker_id, syms, offs)
        return encoders.structured_encode(None, truth, self.profile, noise_seed)

    def content(self, states):
        return mix(states, self.mixer_cfg, self.weights)

    def reconstruct(self, states, speaker):
        return self.decoder(self.content(states), speaker)

    def init_output_bias(self, examples):
        """Start the decoder at the mean training log-mel frame."""
        mean = np.concatenate([ex.target for ex in examples]).mean(axis=0)
        self.decoder.out.bias.data = mean.copy()


def _utt_seed(utt_id):
    return [zlib.crc32(utt_id.encode("utf-8"))]


def prepare_examples(model, manifest, corpus_seed=None, splits=None):
    """Encode every manifest entry once (encoders are frozen).

    Audio comes from disk when the manifest has a root, otherwise it is
    rendered from the ground truth with ``corpus_seed``.
    """
    out = []
    for entry in manifest.entries:
        if splits is not None and entry.split not in splits:
            continue
        if manifest.root is not None:
            wave = manifest.load(entry)
        else:
            wave = synthdata.render(manifest, entry, corpus_seed)
        mel = frontend.mel_spectrogram(wave)
        script = manifest.scripts.get(entry.utt_id)
        stack = model.encode(mel, entry.speaker_id, script, noise_seed=[model.cfg.encoder_seed] + _utt_seed(entry.utt_id))
        syms = offs = None
        if script is not None:
            syms, offs = synthdata.frame_symbols(script, mel.n_frames)
        out.append(Example(entry.utt_id, entry.speaker_id, entry.split, stack.states,
                           model.speaker_encoder.embed_mel(mel), mel.frames, syms, offs))
    return out


def assemble_batch(examples, indices):
    """Stack examples, truncating every utterance to the shortest one."""
    chosen = [examples[i] for i in indices]
    t = min(ex.target.shape[0] for ex in chosen)
    states = np.stack([ex.states[:, :t] for ex in chosen], axis=1)  # [L+1, B, T, D]
    speaker = np.stack([ex.speaker for ex in chosen])
    target = np.stack([ex.target[:t] for ex in chosen])
    return states, speaker, target


def batch_indices(n_examples, batch_size, seed, step):
    rng = np.random.default_rng([seed, step, 0xBA])
    return rng.choice(n_examples, size=batch_size, replace=n_examples < batch_size)


def losses(model, states, speaker, target, lam):
    """Build the graph; returns ``(objective, recon, l2)`` tensors.

    ``l2`` is None when the mixer has no extractor (non-chameleon modes).
    """
    c = model.content(states)
    recon = tc.l1_loss(model.decoder(c, speaker), target)
    if model.extractor is None:
        return recon, recon, None
    s_hat = model.extractor(tc.gradient_reversal(c, lam))
    l2 = tc.mean_over_axis(tc.l2_distance_squared(tc.as_tensor(speaker), s_hat), axis=0)
    return recon + l2, recon, l2


class SGD:
    """SGD with momentum over the non-frozen parameters of a store."""

    def __init__(self, params, lr, momentum=0.9, group_lr_scale=None):
        self.params = params
        self.lr = lr
        self.group_lr_scale = dict(group_lr_scale or {})
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.trainable().items()}

    def step(self, grads):
        for name, g in grads.items():
            p = self.params[name]
            if p.group == "frozen":
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * self.group_lr_scale.get(p.group, 1.0) * v

    def state(self):
        return {f"velocity/{n}": v.copy() for n, v in self.velocity.items()}

    def load_state(self, arrays):
        for key, v in arrays.items():
            name = key.split("/", 1)[1]
            if name not in self.velocity:
                raise KeyError(f"optimizer state for unknown parameter {name!r}")
            self.velocity[name] = v.copy()


def make_optimizer(model, cfg):
    return SGD(model.params, cfg.learning_rate, cfg.momentum,
               {"layer_weights": cfg.layer_weights_lr_scale,
                "speaker_extractor": cfg.extractor_lr_scale})


def training_step(model, optimizer, batch, lam):
    """One forward/backward/update; returns the :class:`LossBreakdown`."""
    states, speaker, target = batch
    objective, recon, l2 = losses(model, states, speaker, target, lam)
    grads = tc.backward(objective)
    optimizer.step(grads)
    return LossBreakdown(float(recon.data), float(l2.data) if l2 is not None else 0.0, lam)


class Trainer:
    def __init__(self, model, examples, cfg, out_dir=None):
        self.model = model
        self.examples = [ex for ex in examples if ex.split == "train"]
        if not self.examples:
            raise ValueError("the train split is empty")
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.optimizer = make_optimizer(model, cfg)
        self.step = 0
        self.history = []
        model.init_output_bias(self.examples)

    def run(self, until=None):
        until = self.cfg.steps if until is None else until
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(self.out_dir / "loss.tsv", "a" if self.step else "w", encoding="utf-8")
        try:
            while self.step < until:
                idx = batch_indices(len(self.examples), self.cfg.batch_size, self.cfg.seed, self.step)
                lam = self.cfg.effective_lambda(self.step)
                try:
                    br = training_step(self.model, self.optimizer, assemble_batch(self.examples, idx), lam)
                except tc.NonFiniteError as exc:
                    raise tc.NonFiniteError(f"step {self.step}: {exc}") from exc
                self.history.append(br)
                if log_fh is not None:
                    log_fh.write(br.line(self.step) + "\n")
                self.step += 1
                if self.out_dir is not None and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"ckpt_{self.step:06d}")
        finally:
            if log_fh is not None:
                log_fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "ckpt_final")
        return self.history

    def save(self, path):
        save_checkpoint(path, self.model, self.optimizer, self.step, self.cfg)

    @classmethod
    def resume(cls, path, examples, cfg=None, out_dir=None):
        model, opt_state, step, saved_cfg = load_checkpoint(path, with_state=True)
        trainer = cls.__new__(cls)
        trainer.model = model
        trainer.examples = [ex for ex in examples if ex.split == "train"]
        trainer.cfg = cfg or saved_cfg
        trainer.out_dir = Path(out_dir) if out_dir else None
        trainer.optimizer = make_optimizer(model, trainer.cfg)
        trainer.optimizer.load_state(opt_state)
        trainer.step = step
        trainer.history = []
        return trainer


def train(model, examples, cfg, out_dir=None):
    trainer = Trainer(model, examples, cfg, out_dir)
    trainer.run()
    return trainer


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_kv(path, values):
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()), encoding="utf-8")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _read_kv(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(cls, raw):
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        v = raw[f.name]
        default = f.default
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(int(x) for x in v.split(",")) if v else ()
        elif isinstance(default, bool):
            kwargs[f.name] = v == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(v)
        elif isinstance(default, float):
            kwargs[f.name] = float(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def save_checkpoint(path, model, optimizer, step, train_cfg):
    """Checkpoint directory: parameters, optimizer state, step and configs."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tc.save_params(path / "params.bin", model.params)
    if optimizer is not None:
        tc.save_container(path / "optim.bin", optimizer.state())
    _write_kv(path / "model.cfg", asdict(model.cfg))
    if train_cfg is not None:
        _write_kv(path / "train.cfg", asdict(train_cfg))
    (path / "step").write_text(f"{step}\n", encoding="utf-8")


def load_checkpoint(path, with_state=False):
    path = Path(path)
    if not (path / "params.bin").exists():
        raise FileNotFoundError(f"{path}: no params.bin")
    cfg = _coerce(ModelConfig, _read_kv(path / "model.cfg"))
    model = VCModel(cfg)
    arrays = tc.load_container(path / "params.bin")
    missing = set(model.params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.params.load_arrays(arrays)
    if not with_state:
        return model
    opt = tc.load_container(path / "optim.bin") if (path / "optim.bin").exists() else {}
    step = int((path / "step").read_text().strip())
    train_cfg = _coerce(TrainConfig, _read_kv(path / "train.cfg")) if (path / "train.cfg").exists() else None
    return model, opt, step, train_cfg
