import numpy as np
import pytest

from chameleon_vc import encoders, evaluation, frontend, synthdata
from chameleon_vc import tensorcore as tc
from chameleon_vc.encoders import StructuredEncoderProfile


@pytest.fixture(scope="module")
def wave(default_corpus):
    return synthdata.render(default_corpus, default_corpus.entries[0], 7)


@pytest.fixture(scope="module")
def embeddings(default_corpus):
    enc = encoders.SpeakerEncoder(0)
    e = np.array([enc(synthdata.render(default_corpus, u, 7)) for u in default_corpus.entries])
    return e, np.array([u.speaker_id for u in default_corpus.entries])


# ---------------------------------------------------------------------------
# random content encoder
# ---------------------------------------------------------------------------

def test_random_encoder_deterministic(wave):
    a = encoders.random_frozen_encode(wave, seed=3)
    b = encoders.random_frozen_encode(wave, seed=3)
    np.testing.assert_array_equal(a.states, b.states)


def test_random_encoder_shape(wave):
    stack = encoders.random_frozen_encode(wave, seed=0)
    t = frontend.mel_spectrogram(wave).n_frames
    assert stack.states.shape == (7, t, 32)
    assert (stack.n_layers, stack.n_frames, stack.dim) == (6, t, 32)


def test_random_encoder_seeds_differ(wave):
    a = encoders.random_frozen_encode(wave, seed=0)
    b = encoders.random_frozen_encode(wave, seed=1)
    assert np.abs(a.states - b.states).max() > 1e-3


def test_random_encoder_params_frozen():
    enc = encoders.ContentEncoder(0)
    assert enc.params
    assert all(p.group == "frozen" for p in enc.params.values())


def test_random_encoder_is_local_in_time(wave):
    # distance-biased attention: a late-frame edit barely reaches early frames
    mel = frontend.mel_spectrogram(wave).frames.copy()
    enc = encoders.ContentEncoder(0)
    a = enc.encode_mel(mel).states
    mel[-1] += 3.0 * np.sin(np.arange(mel.shape[1]))
    b = enc.encode_mel(mel).states
    diff = np.abs(a - b).max(axis=(0, 2))
    assert diff[-1] > 1e-2
    assert diff[: len(diff) // 2].max() < 1e-6 * diff[-1]


def test_random_encoder_layer0_is_projection(wave):
    enc = encoders.ContentEncoder(5)
    mel = frontend.mel_spectrogram(wave).frames
    x = (mel - mel.mean(axis=1, keepdims=True)) / np.sqrt(mel.var(axis=1, keepdims=True) + 1e-5)
    expected = x @ enc.proj.weight.data + enc.proj.bias.data
    np.testing.assert_allclose(enc.encode_mel(mel).states[0], expected, atol=1e-10)


# ---------------------------------------------------------------------------
# speaker encoder
# ---------------------------------------------------------------------------

def test_speaker_embedding_unit_norm(embeddings):
    e, _ = embeddings
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)
    assert e.shape[1] == 16


def test_speaker_embedding_deterministic(wave):
    np.testing.assert_array_equal(encoders.frozen_speaker_encode(wave, 0),
                                  encoders.frozen_speaker_encode(wave, 0))


def test_speaker_encoder_ignores_symbol_order(default_corpus):
    spk = default_corpus.speakers[0]
    script = default_corpus.scripts["spk00_utt00"]
    rev = synthdata.ContentScript(script.symbols[::-1], script.durations_ms[::-1], script.f0_offsets[::-1])
    a = encoders.frozen_speaker_encode(synthdata.synthesize_utterance(spk, script, 0), 0)
    b = encoders.frozen_speaker_encode(synthdata.synthesize_utterance(spk, rev, 0), 0)
    assert a @ b > 0.98


def test_speaker_encoder_separation(embeddings):
    e, spk = embeddings
    cos = e @ e.T
    same = (spk[:, None] == spk[None]) & ~np.eye(len(spk), dtype=bool)
    diff = spk[:, None] != spk[None]
    assert cos[same].mean() - cos[diff].mean() >= 0.2


def test_speaker_encoder_same_speaker_closest(embeddings):
    # speaker level: the mean cosine between a speaker's own utterances beats
    # the mean cosine to every other speaker's utterances
    e, spk = embeddings
    cos = e @ e.T
    for s in np.unique(spk):
        own = spk == s
        intra = cos[np.ix_(own, own)][~np.eye(own.sum(), dtype=bool)].mean()
        for t in np.unique(spk):
            if t != s:
                assert intra > cos[np.ix_(own, spk == t)].mean(), (s, t)
    # utterance level: the nearest other utterance is nearly always the same speaker
    np.fill_diagonal(cos, -np.inf)
    assert np.mean(spk[cos.argmax(axis=1)] == spk) >= 0.95


# ---------------------------------------------------------------------------
# structured encoder
# ---------------------------------------------------------------------------

def test_structured_construction(rng):
    spk, content = rng.standard_normal((2, 9, 4))
    prof = StructuredEncoderProfile(alpha=(0, 1), beta=(1, 0), noise_sigma=0.0)
    states = encoders.structured_encode(None, (spk, content), prof, seed=0).states
    np.testing.assert_array_equal(states[0], spk)
    np.testing.assert_array_equal(states[1], content)


def test_structured_zero_gains(rng):
    spk, content = rng.standard_normal((2, 5, 3))
    prof = StructuredEncoderProfile(alpha=(0, 1, 0), beta=(1, 0, 0), noise_sigma=0.0)
    states = encoders.structured_encode(None, (spk, content), prof, seed=0).states
    assert np.all(states[2] == 0.0)


def test_structured_noise_is_seeded(rng):
    truth = tuple(rng.standard_normal((2, 6, 3)))
    prof = encoders.default_profile(0.1)
    a = encoders.structured_encode(None, truth, prof, seed=1).states
    b = encoders.structured_encode(None, truth, prof, seed=1).states
    c = encoders.structured_encode(None, truth, prof, seed=2).states
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0
    clean = encoders.structured_encode(None, truth, encoders.default_profile(0.0), seed=1).states
    assert np.std(a - clean) == pytest.approx(0.1, rel=0.2)


def test_structured_shape_mismatch(rng, wave):
    prof = encoders.default_profile()
    with pytest.raises(ValueError):
        encoders.structured_encode(None, (np.zeros((4, 3)), np.zeros((5, 3))), prof, 0)
    with pytest.raises(ValueError, match="frames"):
        encoders.structured_encode(wave, (np.zeros((4, 3)), np.zeros((4, 3))), prof, 0)


@pytest.mark.parametrize("alpha,beta", [((1, 1), (1, 1)), ((0, 1), (0, 1)), ((1, 0, 1), (0, 1))])
def test_profile_requires_pure_layers(alpha, beta):
    with pytest.raises(ValueError):
        StructuredEncoderProfile(alpha, beta)


def test_truth_features_previous_symbols():
    tf = encoders.TruthFeatures(0, dim=4)
    prev = tf.previous_symbols([3, 3, 5, 5, 5, 1, 3])
    np.testing.assert_array_equal(prev, [12, 12, 3, 3, 3, 5, 1])


def test_truth_features_content_depends_on_context():
    tf = encoders.TruthFeatures(0)
    _, a = tf(0, [1, 1, 4, 4], [0, 0, 0, 0])
    _, b = tf(0, [2, 2, 4, 4], [0, 0, 0, 0])
    assert np.abs(a[2:] - b[2:]).max() > 0.1
    spk, _ = tf(3, [1, 2], [0, 0])
    np.testing.assert_array_equal(spk[0], spk[1])


def test_beta_zero_layer_probe_at_chance():
    corpus = synthdata.generate_corpus(8, 10, seed=11)
    tf, prof = encoders.TruthFeatures(0), encoders.default_profile(0.1)
    stacks, labels = [], []
    for k, e in enumerate(corpus.entries):
        script = corpus.scripts[e.utt_id]
        syms, offs = synthdata.frame_symbols(script, frontend.frame_count(script.n_samples))
        stacks.append(encoders.structured_encode(None, tf(e.speaker_id, syms, offs), prof, k).states)
        labels.append(e.speaker_id)
    chance = 1 / 8
    content_acc = np.mean([evaluation.speaker_probe_accuracy([s[6] for s in stacks], labels, seed=k)
                           for k in range(5)])
    speaker_acc = evaluation.speaker_probe_accuracy([s[0] for s in stacks], labels)
    assert abs(content_acc - chance) <= 0.10
    assert speaker_acc > 0.9


# ---------------------------------------------------------------------------
# hidden-state dumps
# ---------------------------------------------------------------------------

def test_stack_dump_roundtrip(tmp_path, rng):
    stack = encoders.HiddenStateStack(rng.standard_normal((7, 11, 32)))
    encoders.dump_stack(tmp_path / "stack.bin", stack)
    back = encoders.load_stack(tmp_path / "stack.bin")
    assert back.states.tobytes() == stack.states.tobytes()


def test_params_in_frozen_group_tensorcore():
    enc = encoders.SpeakerEncoder(0)
    assert {p.group for p in enc.params.values()} == {"frozen"}
    assert isinstance(enc.weight, tc.Parameter)
