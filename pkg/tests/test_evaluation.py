import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chameleon_vc import encoders, evaluation, frontend, synthdata
from chameleon_vc.evaluation import (InsufficientDataError, InsufficientVoicingError, ModelEvaluation,
                                     f0_correlation, holm_correct, paired_t_test, wer)
from chameleon_vc.frontend import PitchContour
from oracles import (edit_distance_table, holm_reference, pearson, t_two_sided_p_cdf,
                     t_two_sided_p_scipy)


def contour(f0, voiced=None):
    f0 = np.asarray(f0, float)
    return PitchContour(f0, f0 > 0 if voiced is None else np.asarray(voiced))


# ---------------------------------------------------------------------------
# F0 correlation
# ---------------------------------------------------------------------------

def test_f0_self_correlation():
    c = contour(np.linspace(100, 190, 10))
    res = f0_correlation(c, c)
    assert res.r == pytest.approx(1.0, abs=1e-12) and res.n_frames == 10


def test_f0_affine_invariance(rng):
    f = rng.uniform(100, 200, 30)
    assert f0_correlation(contour(f), contour(2 * f + 10)).r == pytest.approx(1.0, abs=1e-12)


def test_f0_anticorrelation():
    f = np.arange(100, 200, 10.0)
    assert f0_correlation(contour(f), contour(f[::-1])).r == pytest.approx(-1.0, abs=1e-12)


def test_f0_uses_mutually_voiced_frames_only(rng):
    a, b = rng.uniform(100, 200, (2, 40))
    va, vb = rng.random(40) < 0.8, rng.random(40) < 0.8
    res = f0_correlation(contour(np.where(va, a, 0)), contour(np.where(vb, b, 0)))
    both = va & vb
    assert res.n_frames == both.sum()
    assert res.r == pytest.approx(pearson(a[both], b[both]), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_f0_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = contour(rng.uniform(80, 300, 25)), contour(rng.uniform(80, 300, 25))
    assert abs(f0_correlation(a, b).r - f0_correlation(b, a).r) <= 1e-12


def test_f0_insufficient_voicing():
    a = contour(np.r_[np.full(9, 150.0), np.zeros(20)])
    with pytest.raises(InsufficientVoicingError, match="insufficient voicing"):
        f0_correlation(a, a)


def test_f0_length_mismatch():
    with pytest.raises(ValueError):
        f0_correlation(contour(np.full(12, 100.0)), contour(np.full(13, 100.0)))


def test_f0_constant_contour_gives_zero():
    assert f0_correlation(contour(np.full(12, 150.0)), contour(np.linspace(100, 200, 12))).r == 0.0


def test_f0_fisher_interval():
    res = f0_correlation(contour(np.arange(1, 21.0)), contour(np.arange(1, 21.0) + np.tile([0, 3.0], 10)))
    z, se = math.atanh(res.r), 1.96 / math.sqrt(res.n_frames - 3)
    assert res.ci95 == pytest.approx(0.5 * (math.tanh(z + se) - math.tanh(z - se)), rel=1e-12)


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------

def test_wer_examples():
    assert wer("abc", "abc").wer == 0
    r = wer("abc", "axc")
    assert r.wer == pytest.approx(1 / 3) and (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    r = wer("ab", "axy")
    assert r.wer == 1.0 and (r.substitutions, r.insertions, r.deletions) == (1, 1, 0)


def test_wer_split_prefers_substitution():
    r = wer("abcd", "ab")
    assert (r.substitutions, r.insertions, r.deletions) == (0, 0, 2)
    r = wer("ab", "ba")
    assert (r.substitutions, r.insertions, r.deletions) == (2, 0, 0)


def test_wer_empty_reference():
    with pytest.raises(ValueError, match="empty reference"):
        wer([], [1])


def test_wer_matches_graph_oracle_up_to_length_4():
    seqs, _, dist = edit_distance_table(4)
    for i, ref in enumerate(seqs):
        if not ref:
            continue
        for j, hyp in enumerate(seqs):
            r = wer(ref, hyp)
            assert r.errors == dist[i, j], (ref, hyp)
            assert r.ref_len - r.deletions + r.insertions == len(hyp)
            assert (r.wer == 0) == (ref == hyp)


@settings(max_examples=200, deadline=None)
@given(a=st.lists(st.integers(0, 4), min_size=1, max_size=9), b=st.lists(st.integers(0, 4), min_size=1, max_size=9))
def test_wer_distance_is_symmetric(a, b):
    assert wer(a, b).errors == wer(b, a).errors
    assert wer(a, b).errors <= max(len(a), len(b))


# ---------------------------------------------------------------------------
# collapse and probes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("labels,min_run,expected", [
    ([1, 1, 1, 2, 2, 2, 2, 3, 3, 3], 3, [1, 2, 3]),
    ([1, 1, 1, 2, 1, 1, 1], 3, [1]),  # short blip dropped, neighbours merge
    ([1, 1, 2, 2, 3, 3], 3, []),
    ([5, 5, 4], 1, [5, 4]),
    ([], 3, []),
])
def test_collapse(labels, min_run, expected):
    assert evaluation.collapse(labels, min_run) == expected


@pytest.fixture(scope="module")
def probe_data(default_corpus):
    out = []
    for e in default_corpus.entries:
        mel = frontend.mel_spectrogram(synthdata.render(default_corpus, e, 7))
        syms, _ = synthdata.frame_symbols(default_corpus.scripts[e.utt_id], mel.n_frames)
        out.append((e, mel, syms))
    return out


def test_symbol_probe_on_ground_truth(probe_data, default_corpus):
    train = [(m, s) for e, m, s in probe_data if e.split == "train"]
    probe = evaluation.SymbolProbe().fit([m for m, _ in train], [s for _, s in train])
    res = evaluation.content_recovery([m for m, _ in train],
                                      [default_corpus.scripts[e.utt_id].symbols
                                       for e, _, _ in probe_data if e.split == "train"], probe)
    assert res.wer < 0.2
    assert len(res.per_utterance) == len(train)


def test_content_recovery_identity():
    class Echo:
        def transcribe(self, mel):
            return list(mel)

    res = evaluation.content_recovery([[1, 2, 3], [4, 5]], [[1, 2, 3], [4, 5]], Echo())
    assert res.wer == 0.0


def test_probe_errors():
    with pytest.raises(RuntimeError, match="untrained"):
        evaluation.SymbolProbe().predict_frames(np.zeros((3, 40)))
    probe = evaluation.SymbolProbe().fit([np.random.default_rng(0).standard_normal((24, 40))],
                                         [np.arange(24) % 12])
    with pytest.raises(ValueError, match="empty"):
        probe.transcribe(np.zeros((0, 40)))


def _structured_items(layer, n_speakers=6, n_utts=10, noise=0.1):
    corpus = synthdata.generate_corpus(n_speakers, n_utts, seed=21)
    tf = encoders.TruthFeatures(1)
    prof = encoders.default_profile(noise)
    feats, labels = [], []
    for k, e in enumerate(corpus.entries):
        script = corpus.scripts[e.utt_id]
        syms, offs = synthdata.frame_symbols(script, frontend.frame_count(script.n_samples))
        feats.append(encoders.structured_encode(None, tf(e.speaker_id, syms, offs), prof, k).states[layer])
        labels.append(e.speaker_id)
    return feats, np.array(labels)


def test_speaker_probe_on_pure_speaker_features():
    feats, labels = _structured_items(layer=0)
    assert evaluation.speaker_probe_accuracy(feats, labels) > 0.9


def test_speaker_probe_on_noise():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(6), 20)
    accs = [evaluation.speaker_probe_accuracy(rng.standard_normal((120, 32)), labels, seed=s) for s in range(5)]
    assert abs(np.mean(accs) - 1 / 6) <= 0.15


def test_speaker_probe_shuffled_labels():
    feats, labels = _structured_items(layer=0)
    rng = np.random.default_rng(0)
    accs = [evaluation.speaker_probe_accuracy(feats, rng.permutation(labels), seed=s) for s in range(10)]
    assert abs(np.mean(accs) - 1 / 6) <= 0.1


def test_speaker_probe_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        evaluation.speaker_probe_accuracy(rng.standard_normal((20, 4)), np.zeros(20, int))
    with pytest.raises(InsufficientDataError):
        evaluation.speaker_probe_accuracy(rng.standard_normal((18, 4)), np.repeat([0, 1], 9))


# ---------------------------------------------------------------------------
# significance tests
# ---------------------------------------------------------------------------

def test_t_test_degenerate_rules():
    assert paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    t, p = paired_t_test([2, 3, 4], [1, 2, 3])
    assert p == 0.0 and t == math.inf


def test_t_test_worked_example():
    t, p = paired_t_test([1, -1, 2, 0], [0, 0, 0, 0])
    assert t == pytest.approx(0.7746, abs=1e-4)
    assert p == pytest.approx(0.495, abs=1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_t_test_matches_numeric_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    a = rng.standard_normal(n)
    b = a + rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), n)
    t, p = paired_t_test(a, b)
    d = a - b
    assert t == pytest.approx(d.mean() / (d.std(ddof=1) / math.sqrt(n)), rel=1e-12)
    assert abs(p - t_two_sided_p_scipy(t, n - 1)) < 1e-9
    assert abs(p - t_two_sided_p_cdf(t, n - 1)) < 1e-9


@pytest.mark.parametrize("t,dof", [(0.0, 1), (1e-6, 3), (12.0, 1), (40.0, 2), (3.2, 200), (80.0, 50)])
def test_t_p_extremes(t, dof):
    assert abs(evaluation.t_two_sided_p(t, dof) - t_two_sided_p_cdf(t, dof)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(-100, 100))
def test_t_test_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 8))
    t1, p1 = paired_t_test(a, b)
    t2, p2 = paired_t_test(a + c, b + c)
    assert t2 == pytest.approx(t1, rel=1e-6, abs=1e-9)
    assert p2 == pytest.approx(p1, abs=1e-8)


def test_t_test_errors():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [2.0])


@pytest.mark.parametrize("raw,expected", [
    ([0.03], [0.03]),
    ([0.01, 0.04, 0.03], [0.03, 0.06, 0.06]),
    ([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]),
])
def test_holm_examples(raw, expected):
    np.testing.assert_allclose(holm_correct(raw), expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(ps=st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_holm_properties(ps):
    adj = holm_correct(ps)
    np.testing.assert_allclose(adj, holm_reference(ps), atol=1e-15)
    assert np.all(adj >= np.asarray(ps) - 1e-15) and np.all(adj <= 1)
    order = np.argsort(ps, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)


def test_holm_rejects_out_of_range():
    with pytest.raises(ValueError):
        holm_correct([0.5, 1.2])


# ---------------------------------------------------------------------------
# score files and reports
# ---------------------------------------------------------------------------

def test_score_file_roundtrip(tmp_path):
    scores = {"A": {"c1": 0.5, "c2": 1 / 3}, "B": {"c1": 0.25, "c2": 2.0}}
    evaluation.write_scores(tmp_path / "s.tsv", scores)
    assert (tmp_path / "s.tsv").read_text().splitlines()[0] == "c1\tA\t0.5"
    assert evaluation.read_scores(tmp_path / "s.tsv") == scores


def test_score_file_malformed(tmp_path):
    (tmp_path / "s.tsv").write_text("c1\tA\n")
    with pytest.raises(ValueError):
        evaluation.read_scores(tmp_path / "s.tsv")


def test_report_single_model_single_metric():
    report = evaluation.build_report([ModelEvaluation("m", {"wer": {"a": 0.1, "b": 0.3}})])
    lines = report.to_table().splitlines()
    assert len(lines) == 2 and lines[1].startswith("m")
    assert report.rows[0][1]["wer"] == pytest.approx(0.2)
    assert not report.tests


def test_report_identical_models_not_significant():
    cases = {f"c{i}": float(i % 3) for i in range(10)}
    report = evaluation.build_report([ModelEvaluation("a", {"wer": dict(cases)}),
                                      ModelEvaluation("b", {"wer": dict(cases)})])
    assert len(report.tests) == 1 and not report.tests[0].significant
    assert report.tests[0].p_raw == 1.0


def test_report_detects_difference_and_emits_kv():
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 1, 20)
    models = [ModelEvaluation(n, {"f0_corr": {f"c{i}": float(v) for i, v in enumerate(base + shift)}},
                              {"speaker_probe": 0.5})
              for n, shift in (("x", 0.0), ("y", 0.5), ("z", 0.01))]
    report = evaluation.build_report(models)
    sig = {(t.system_a, t.system_b): t.significant for t in report.tests}
    assert sig[("x", "y")] and sig[("y", "z")]
    kv = report.to_kv()
    assert "x.f0_corr = " in kv and "x.speaker_probe = 0.5" in kv
    assert "test.f0_corr.x.y.significant = True" in kv
    assert report.to_table() == evaluation.build_report(models).to_table()


def test_report_needs_models():
    with pytest.raises(InsufficientDataError):
        evaluation.build_report([])
