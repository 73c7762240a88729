"""Objective metrics: symbol error rate, F0 correlation, probes and significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import frontend

SIGNIFICANCE_LEVEL = 0.05


class InsufficientVoicingError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# F0 correlation
# ---------------------------------------------------------------------------

@dataclass
class F0CorrelationResult:
    r: float
    n_frames: int
    ci95: float  # half-width, from the Fisher z interval mapped back to r


def _fisher_halfwidth(r, n):
    if n <= 3:
        return float("inf")
    z = math.atanh(max(-1 + 1e-15, min(1 - 1e-15, r)))
    se = 1.96 / math.sqrt(n - 3)
    return 0.5 * (math.tanh(z + se) - math.tanh(z - se))


def f0_correlation(src, cnv, min_frames=10):
    """Pearson r between two contours over the frames voiced in both.

    Contours must have equal length (frame-index alignment, no warping).
    A contour that is constant over the shared frames gives ``r = 0``.
    """
    if len(src) != len(cnv):
        raise ValueError(f"contour lengths differ: {len(src)} vs {len(cnv)}")
    both = np.asarray(src.voiced) & np.asarray(cnv.voiced)
    n = int(both.sum())
    if n < min_frames:
        raise InsufficientVoicingError(f"insufficient voicing: {n} mutually voiced frames (< {min_frames})")
    a = np.asarray(src.f0, float)[both]
    b = np.asarray(cnv.f0, float)[both]
    a, b = a - a.mean(), b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    r = float(np.clip(a @ b / den, -1.0, 1.0)) if den > 0 else 0.0
    return F0CorrelationResult(r, n, _fisher_halfwidth(r, n))


def mean_with_ci(values):
    """Mean and normal-approximation 95% half-width of a sample."""
    v = np.asarray(values, float)
    if len(v) == 0:
        raise InsufficientDataError("no values to aggregate")
    hw = 1.96 * v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else float("inf")
    return float(v.mean()), float(hw)


# ---------------------------------------------------------------------------
# symbol error rate
# ---------------------------------------------------------------------------

@dataclass
class WerResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        return self.errors / self.ref_len


def wer(reference, hypothesis):
    """Levenshtein alignment of two symbol sequences.

    When several minimal alignments exist the backtrace prefers
    substitution, then insertion, then deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev, row, r = d[-1], [i], ref[i - 1]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1))
        d.append(row)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerResult(int(s), ins, dels, n)


def collapse(frame_labels, min_run=3):
    """Run-length collapse, dropping runs shorter than ``min_run`` frames."""
    labels = np.asarray(frame_labels)
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.r_[0, edges]
    ends = np.r_[edges, len(labels)]
    out = []
    for a, b in zip(starts, ends):
        if b - a >= min_run and (not out or out[-1] != labels[a]):
            out.append(int(labels[a]))
    return out


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def _ridge_fit(x, labels, n_classes, reg):
    xb = np.c_[x, np.ones(len(x))]
    y = np.eye(n_classes)[labels]
    return np.linalg.solve(xb.T @ xb + reg * np.eye(xb.shape[1]), xb.T @ y)


def _ridge_predict(w, x):
    return (np.c_[x, np.ones(len(x))] @ w).argmax(axis=1)


class SymbolProbe:
    """Frame-level linear symbol classifier on log-mel frames.

    Each frame has its mean over bins removed, which discards overall level
    and keeps the spectral shape.
    """

    def __init__(self, n_symbols=12, reg=1.0, min_run=3):
        self.n_symbols = n_symbols
        self.reg = reg
        self.min_run = min_run
        self.w = None

    @staticmethod
    def features(mel):
        frames = mel.frames if isinstance(mel, frontend.MelSpectrogram) else np.asarray(mel, float)
        return frames - frames.mean(axis=1, keepdims=True)

    def fit(self, mels, frame_labels):
        x = np.vstack([self.features(m) for m in mels])
        y = np.concatenate([np.asarray(lab, int) for lab in frame_labels])
        if len(x) != len(y):
            raise ValueError("frame labels do not match mel frames")
        self.w = _ridge_fit(x, y, self.n_symbols, self.reg)
        return self

    def predict_frames(self, mel):
        if self.w is None:
            raise RuntimeError("probe is untrained")
        x = self.features(mel)
        if len(x) == 0:
            raise ValueError("empty utterance")
        return _ridge_predict(self.w, x)

    def transcribe(self, mel):
        return collapse(self.predict_frames(mel), self.min_run)


@dataclass
class ContentRecovery:
    hypotheses: list
    results: list

    @property
    def wer(self):
        """Corpus-level rate: total errors over total reference length."""
        return sum(r.errors for r in self.results) / sum(r.ref_len for r in self.results)

    @property
    def per_utterance(self):
        return [r.wer for r in self.results]


def content_recovery(mels, references, probe):
    hyps = [probe.transcribe(m) for m in mels]
    return ContentRecovery(hyps, [wer(ref, h) for ref, h in zip(references, hyps)])


def speaker_probe_accuracy(features, labels, seed=0, reg=1.0, min_per_speaker=10):
    """Held-out accuracy of a linear speaker classifier on time-averaged features.

    ``features`` is a list of ``[T, D]`` arrays (or an ``[N, D]`` array of
    already-averaged vectors). Each speaker's items are split in half at
    random; features are standardised with training statistics.
    """
    if isinstance(features, np.ndarray) and features.ndim == 2:
        x = features.astype(float)
    else:
        x = np.stack([np.asarray(f, float).mean(axis=0) for f in features])
    labels = np.asarray(labels)
    speakers = np.unique(labels)
    if len(speakers) < 2:
        raise InsufficientDataError("need at least 2 speakers")
    counts = np.array([(labels == s).sum() for s in speakers])
    if counts.min() < min_per_speaker:
        raise InsufficientDataError(f"need >= {min_per_speaker} items per speaker, got {counts.min()}")
    rng = np.random.default_rng(seed)
    train = np.zeros(len(labels), dtype=bool)
    for s in speakers:
        idx = rng.permutation(np.flatnonzero(labels == s))
        train[idx[: len(idx) // 2]] = True
    mu, sd = x[train].mean(axis=0), x[train].std(axis=0) + 1e-12
    z = (x - mu) / sd
    classes = {s: i for i, s in enumerate(speakers)}
    y = np.array([classes[s] for s in labels])
    w = _ridge_fit(z[train], y[train], len(speakers), reg)
    return float(np.mean(_ridge_predict(w, z[~train]) == y[~train]))


# ---------------------------------------------------------------------------
# significance
# ---------------------------------------------------------------------------

def _t_density(x, dof):
    c = math.lgamma((dof + 1) / 2) - math.lgamma(dof / 2) - 0.5 * math.log(dof * math.pi)
    return math.exp(c - (dof + 1) / 2 * math.log1p(x * x / dof))


def _adaptive_simpson(f, a, b, tol, max_depth=60):
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6 * (fa + 4 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return (recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f((a + b) / 2)
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def t_two_sided_p(t, dof):
    """Two-sided p-value ``P(|T| >= |t|)`` for Student's t with ``dof`` degrees of freedom.

    Integrates the density over ``[0, |t|]`` piecewise (unit-width pieces
    near the origin, then doubling) so that each piece is smooth.
    """
    x = abs(float(t))
    if math.isinf(x):
        return 0.0
    f = lambda u: _t_density(u, dof)  # noqa: E731
    area, lo, width = 0.0, 0.0, 1.0
    while lo < x:
        hi = min(x, lo + width)
        area += _adaptive_simpson(f, lo, hi, 1e-13)
        lo, width = hi, width * 2 if hi >= 4 else width
    return float(min(1.0, max(0.0, 1.0 - 2.0 * area)))


def paired_t_test(scores_a, scores_b):
    """Two-sided paired t-test on ``a - b``; returns ``(t, p)``.

    With zero-variance differences, ``p = 0`` if their mean is nonzero and
    ``p = 1`` otherwise (``t`` is then ``±inf`` or 0).
    """
    a, b = np.asarray(scores_a, float), np.asarray(scores_b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D with equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0 or sd <= 1e-14 * max(1.0, abs(mean)):
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), t_two_sided_p(t, n - 1)


def holm_correct(raw_ps):
    """Holm step-down adjusted p-values, returned in the input order."""
    p = np.asarray(raw_ps, float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adj = np.maximum.accumulate(adj)
    out = np.empty(m)
    out[order] = adj
    return out


@dataclass
class PairwiseTest:
    metric: str
    system_a: str
    system_b: str
    t: float
    p_raw: float
    p_holm: float = float("nan")

    @property
    def significant(self):
        return self.p_holm < SIGNIFICANCE_LEVEL


def pairwise_tests(scores, metric="score"):
    """All pairwise paired t-tests between systems, Holm-corrected together.

    ``scores`` maps system -> {testcase_id: score}; only shared testcases
    are paired.
    """
    tests = []
    for a, b in combinations(sorted(scores), 2):
        common = sorted(set(scores[a]) & set(scores[b]))
        if len(common) < 2:
            raise InsufficientDataError(f"systems {a} and {b} share fewer than 2 testcases")
        t, p = paired_t_test([scores[a][k] for k in common], [scores[b][k] for k in common])
        tests.append(PairwiseTest(metric, a, b, t, p))
    if tests:
        for test, adj in zip(tests, holm_correct([x.p_raw for x in tests])):
            test.p_holm = float(adj)
    return tests


def read_scores(path):
    """Read ``testcase_id<TAB>system<TAB>score`` lines into system -> {testcase: score}."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 3 tab-separated fields")
        case, system, score = parts
        out.setdefault(system, {})[case] = float(score)
    return out


def write_scores(path, scores):
    lines = [f"{case}\t{system}\t{score!r}" for system in sorted(scores)
             for case, score in sorted(scores[system].items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ModelEvaluation:
    """Per-model artifacts: per-testcase metric scores plus scalar summaries."""

    name: str
    per_case: dict = field(default_factory=dict)  # metric -> {testcase: score}
    scalars: dict = field(default_factory=dict)  # metric -> value


@dataclass
class EvalReport:
    rows: list  # (model, {column: value})
    tests: list

    def columns(self):
        cols = []
        for _, values in self.rows:
            cols += [c for c in values if c not in cols]
        return cols

    def to_table(self):
        cols = self.columns()
        cells = [["model"] + cols]
        for name, values in self.rows:
            cells.append([name] + [_fmt(values.get(c)) for c in cols])
        widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        if self.tests:
            lines.append("")
            lines.append("pairwise tests (Holm-corrected within metric)")
            for t in self.tests:
                mark = "*" if t.significant else ""
                lines.append(f"{t.metric}: {t.system_a} vs {t.system_b}  t={_fmt(t.t)}  "
                             f"p={_fmt(t.p_raw)}  p_holm={_fmt(t.p_holm)}{mark}")
        return "\n".join(lines) + "\n"

    def to_kv(self):
        lines = []
        for name, values in self.rows:
            lines += [f"{name}.{k} = {v!r}" for k, v in values.items()]
        for t in self.tests:
            key = f"test.{t.metric}.{t.system_a}.{t.system_b}"
            lines += [f"{key}.t = {t.t!r}", f"{key}.p_raw = {t.p_raw!r}", f"{key}.p_holm = {t.p_holm!r}",
                      f"{key}.significant = {t.significant}"]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def build_report(models):
    """Tabulate per-model metrics and test every metric pairwise across models."""
    if not models:
        raise InsufficientDataError("no model evaluations to report")
    rows = []
    for m in models:
        values = {}
        for metric, cases in m.per_case.items():
            if not cases:
                raise InsufficientDataError(f"{m.name}: no scores for {metric}")
            mean, hw = mean_with_ci(list(cases.values()))
            values[metric] = mean
            values[f"{metric}_ci95"] = hw
        values.update(m.scalars)
        rows.append((m.name, values))
    tests = []
    if len(models) > 1:
        metrics = sorted({k for m in models for k in m.per_case})
        for metric in metrics:
            scores = {m.name: m.per_case[metric] for m in models if metric in m.per_case}
            if len(scores) > 1:
                tests += pairwise_tests(scores, metric)
    return EvalReport(rows, tests)
