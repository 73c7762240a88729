import numpy as np
import pytest

from chameleon_vc import convert as cv
from chameleon_vc import frontend, synthdata, trainer
from chameleon_vc.mixer import MixerConfig
from chameleon_vc.synthdata import Waveform


@pytest.fixture(scope="module")
def trained(default_corpus, tmp_path_factory):
    model = trainer.VCModel(trainer.ModelConfig())
    examples = trainer.prepare_examples(model, default_corpus, corpus_seed=7)
    out = tmp_path_factory.mktemp("convert_run")
    trainer.Trainer(model, examples, trainer.TrainConfig(steps=60), out).run()
    return model, examples, out / "ckpt_final"


@pytest.fixture(scope="module")
def waves(default_corpus):
    return {e.utt_id: synthdata.render(default_corpus, e, 7) for e in default_corpus.entries}


def test_self_conversion_equals_reconstruction(trained, waves):
    model, examples, _ = trained
    ex = examples[0]
    out = cv.convert(waves[ex.utt_id], waves[ex.utt_id], model)
    recon = model.reconstruct(ex.states, ex.speaker).data
    assert out.frames.tobytes() == recon.tobytes()


def test_output_frame_count(trained, waves):
    model, _, _ = trained
    src, tgt = waves["spk00_utt00"], waves["spk06_utt01"]
    out = cv.convert(src, tgt, model)
    assert out.frames.shape == (frontend.mel_spectrogram(src).n_frames, 40)
    short = Waveform(tgt.samples[:2000])
    assert cv.convert(src, short, model).n_frames == out.n_frames


def test_different_targets_differ(trained, waves):
    model, _, _ = trained
    src = waves["spk00_utt00"]
    b = cv.convert(src, waves["spk06_utt00"], model).frames
    c = cv.convert(src, waves["spk07_utt00"], model).frames
    assert np.abs(b - c).mean() > 1e-6


def test_conversion_deterministic_from_checkpoint(trained, waves):
    model, _, ckpt = trained
    src, tgt = waves["spk01_utt02"], waves["spk07_utt03"]
    a = cv.convert(src, tgt, ckpt)
    b = cv.convert(src, tgt, ckpt)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.tobytes() == cv.convert(src, tgt, model).frames.tobytes()


def test_target_length_independence(trained, waves, default_corpus):
    # halving the target moves the output less than switching target speaker
    model, _, _ = trained
    test_utts = [e.utt_id for e in default_corpus.split("test")]
    truncation, swap = [], []
    for src in ("spk00_utt00", "spk02_utt01", "spk04_utt03"):
        for tgt in test_utts:
            other = next(u for u in test_utts if u[:5] != tgt[:5])
            full = cv.convert(waves[src], waves[tgt], model).frames
            half = Waveform(waves[tgt].samples[: len(waves[tgt]) // 2])
            truncation.append(np.abs(cv.convert(waves[src], half, model).frames - full).mean())
            swap.append(np.abs(cv.convert(waves[src], waves[other], model).frames - full).mean())
    assert np.mean(truncation) < np.mean(swap)
    assert np.median(np.array(truncation) / np.array(swap)) < 1.0


def test_mixer_mismatch_rejected(trained, waves):
    model, _, _ = trained
    src = waves["spk00_utt00"]
    with pytest.raises(cv.CheckpointMismatchError):
        cv.convert(src, src, model, MixerConfig("last_layer"))
    with pytest.raises(cv.CheckpointMismatchError):
        cv.convert(src, src, model, ("fixed_average", (4, 6)))
    cv.convert(src, src, model, MixerConfig("chameleon"))


def test_structured_model_needs_truth(default_corpus, waves):
    model = trainer.VCModel(trainer.ModelConfig(encoder="structured"))
    src = waves["spk00_utt00"]
    with pytest.raises(ValueError, match="script"):
        cv.convert(src, src, model)
    out = cv.convert(src, src, model, source_truth=(0, default_corpus.scripts["spk00_utt00"]))
    assert out.n_frames == frontend.mel_spectrogram(src).n_frames


def test_extractor_not_used_at_inference(trained, waves):
    model, _, _ = trained
    src, tgt = waves["spk00_utt00"], waves["spk06_utt00"]
    before = cv.convert(src, tgt, model).frames
    saved = model.extractor
    model.extractor = None
    try:
        after = cv.convert(src, tgt, model).frames
    finally:
        model.extractor = saved
    assert before.tobytes() == after.tobytes()


def test_resynthesis_produces_audio(trained, waves):
    model, _, _ = trained
    src = waves["spk00_utt00"]
    mel = cv.convert(src, waves["spk06_utt00"], model)
    audio = cv.resynthesize(mel, frontend.estimate_f0(src))
    assert audio.sample_rate == 16000
    assert len(audio) == 160 * (mel.n_frames - 1) + 400
    assert 0 < np.abs(audio.samples).max() <= 1.0
