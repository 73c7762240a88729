"""Experiment plumbing shared by the CLI and the acceptance suite.

Zero-shot test pairs take every non-train utterance as a source and an
utterance of a different held-out speaker as the target.
"""

from __future__ import annotations

import numpy as np

from . import evaluation, frontend
from .convert import convert_states


def zero_shot_pairs(examples):
    """``(source, target)`` example pairs, deterministic in manifest order."""
    sources = [e for e in examples if e.split != "train"]
    targets = [e for e in examples if e.split == "test"]
    pairs = []
    for i, src in enumerate(sources):
        cands = [t for t in targets if t.speaker_id != src.speaker_id]
        if cands:
            pairs.append((src, cands[i % len(cands)]))
    if not pairs:
        raise evaluation.InsufficientDataError("no zero-shot pairs: need held-out speakers")
    return pairs


def train_symbol_probe(examples, **kwargs):
    """Symbol probe fit on the ground-truth mels of the train split."""
    train = [e for e in examples if e.split == "train"]
    if not train or train[0].frame_symbols is None:
        raise evaluation.InsufficientDataError("probe training needs train utterances with scripts")
    return evaluation.SymbolProbe(**kwargs).fit([e.target for e in train], [e.frame_symbols for e in train])


def content_speaker_probe(model, examples, seed=0, n_splits=5):
    """Speaker probe accuracy on content features, averaged over split seeds.

    Each utterance contributes its two halves as separate items so that a
    corpus with 5 utterances per speaker meets the 10-items requirement.
    """
    feats, labels = [], []
    for e in examples:
        c = model.content(e.states).data
        h = len(c) // 2
        feats += [c[:h], c[h:]]
        labels += [e.speaker_id] * 2
    return float(np.mean([evaluation.speaker_probe_accuracy(feats, labels, seed=seed + k)
                          for k in range(n_splits)]))


def source_symbols(examples, manifest):
    return {e.utt_id: list(manifest.scripts[e.utt_id].symbols) for e in examples}


def evaluate_model(name, model, examples, manifest, probe, voicing_threshold=0.5):
    """Convert all zero-shot pairs and score them.

    Per testcase (source utterance): converted WER, reconstruction WER and
    source/converted F0 correlation. Scalars: corpus-level WERs, mean F0
    correlation with its CI, and the content-feature speaker probe.
    """
    pairs = zero_shot_pairs(examples)
    per_case = {"wer": {}, "wer_recon": {}, "f0_corr": {}}
    cnv_mels, rec_mels, refs = [], [], []
    for src, tgt in pairs:
        case = f"{src.utt_id}->{tgt.utt_id}"
        cnv = convert_states(model, src.states, tgt.speaker)
        rec = convert_states(model, src.states, src.speaker)
        ref = list(manifest.scripts[src.utt_id].symbols)
        cnv_mels.append(cnv)
        rec_mels.append(rec)
        refs.append(ref)
        per_case["wer"][case] = evaluation.wer(ref, probe.transcribe(cnv)).wer
        per_case["wer_recon"][case] = evaluation.wer(ref, probe.transcribe(rec)).wer
        try:
            r = evaluation.f0_correlation(frontend.estimate_f0_mel(src.target, voicing_threshold),
                                          frontend.estimate_f0_mel(cnv, voicing_threshold))
            per_case["f0_corr"][case] = r.r
        except evaluation.InsufficientVoicingError:
            pass
    scalars = {
        "wer_corpus": evaluation.content_recovery(cnv_mels, refs, probe).wer,
        "wer_recon_corpus": evaluation.content_recovery(rec_mels, refs, probe).wer,
        "n_pairs": len(pairs),
    }
    try:
        scalars["speaker_probe"] = content_speaker_probe(model, examples)
    except evaluation.InsufficientDataError:
        pass
    return evaluation.ModelEvaluation(name, per_case, scalars)
