"""Word error rate, per-user aggregation, bootstrap intervals, win/loss diffs."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_words


# alignment operations
MATCH, SUB, DEL, INS = "=", "S", "D", "I"


def align(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, str | None, str | None]]:
    """Minimal unit-cost alignment as ``(op, ref_word, hyp_word)`` triples.

    The backtrace prefers the diagonal (match or substitution), then
    deletion, then insertion whenever several moves are optimal.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append((DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append((INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> WerBreakdown:
    if not reference:
        raise MetricsError("reference must contain at least one word")
    counts = Counter(op for op, _, _ in align(reference, hypothesis))
    return WerBreakdown(counts[SUB], counts[DEL], counts[INS], len(reference))


@dataclass
class UserReport:
    user_id: str
    utterances: list[WerBreakdown]

    @property
    def errors(self) -> int:
        return sum(u.errors for u in self.utterances)

    @property
    def reference_words(self) -> int:
        return sum(u.reference_words for u in self.utterances)

    @property
    def wer(self) -> float:
        """Pooled WER: all errors over all reference words of this user."""
        return self.errors / self.reference_words


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95
    resamples: int = 10_000
    seed: int = 0


def bootstrap_ci(values: Sequence[float], resamples: int = 10_000, level: float = 0.95,
                 seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap of the mean.

    Resample indices are drawn as one ``(resamples, n)`` block from
    ``numpy.random.default_rng(seed).integers(0, n, ...)``.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise MetricsError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(means, [tail, 100.0 - tail])
    return ConfidenceInterval(float(lo), float(hi), level, resamples, seed)


def macro_average(reports: Sequence[UserReport] | Sequence[float], resamples: int = 10_000,
                  level: float = 0.95, seed: int = 0) -> tuple[float, ConfidenceInterval | None]:
    """Unweighted mean of per-user WERs with a bootstrap interval.

    Accepts user reports or bare per-user values.  ``resamples=0`` skips
    the interval.
    """
    values = [r.wer if isinstance(r, UserReport) else float(r) for r in reports]
    if not values:
        raise MetricsError("no users to average")
    mean = float(np.mean(values))
    if resamples == 0:
        return mean, None
    return mean, bootstrap_ci(values, resamples, level, seed)


def pooled_wer(reports: Sequence[UserReport]) -> float:
    if not reports:
        raise MetricsError("no users to pool")
    return sum(r.errors for r in reports) / sum(r.reference_words for r in reports)


# --- histograms ------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramBin:
    left: float
    right: float
    count: int


def histogram(values: Sequence[float], bin_width: float) -> list[HistogramBin]:
    """Left-closed bins of ``bin_width`` anchored at 0, from the lowest to the highest occupied bin."""
    if bin_width <= 0:
        raise MetricsError("bin_width must be positive")
    if not values:
        return []
    # rounding guards values that sit on a bin edge, e.g. 0.3 / 0.1
    slots = [math.floor(round(v / bin_width, 9)) for v in values]
    counts = Counter(slots)
    return [
        HistogramBin(round(k * bin_width, 12), round((k + 1) * bin_width, 12), counts.get(k, 0))
        for k in range(min(slots), max(slots) + 1)
    ]


def write_histogram(path: str | Path, bins: Sequence[HistogramBin]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_left,bin_right,count\n")
        for b in bins:
            fh.write(f"{b.left:g},{b.right:g},{b.count}\n")


def read_histogram(path: str | Path) -> list[HistogramBin]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [HistogramBin(float(r["bin_left"]), float(r["bin_right"]), int(r["count"]))
                for r in csv.DictReader(fh)]


# --- win/loss analysis -------------------------------------------------------------

@dataclass(frozen=True)
class DiffRecord:
    utterance_id: str
    label: str  # "W" if system b fixes the span, "L" if it breaks it
    reference: tuple[str, ...]
    hyp_a: tuple[str, ...]
    hyp_b: tuple[str, ...]
    counts: tuple[tuple[str, int], ...]


def _ref_errors(ref: Sequence[str], hyp: Sequence[str]) -> tuple[list[bool], list[list[str]]]:
    """Per reference position: is it wrong, and which hypothesis words land on it.

    Insertions are charged to the following reference word (or the last
    one at the end of the utterance).
    """
    wrong = [False] * len(ref)
    words: list[list[str]] = [[] for _ in ref]
    pending: list[str] = []
    i = 0
    for op, _, h in align(ref, hyp):
        if op == INS:
            pending.append(h)
            continue
        words[i].extend(pending)
        wrong[i] = op != MATCH or bool(pending)
        pending = []
        if h is not None:
            words[i].append(h)
        i += 1
    if pending and ref:
        words[-1].extend(pending)
        wrong[-1] = True
    return wrong, words


def win_loss_diff(refs: Mapping[str, Sequence[str]], hyps_a: Mapping[str, Sequence[str]],
                  hyps_b: Mapping[str, Sequence[str]], user_lm_sentences: Sequence[str]) -> list[DiffRecord]:
    if set(refs) != set(hyps_a) or set(refs) != set(hyps_b):
        raise MetricsError("reference and hypothesis utterance ids differ")
    vocab = Counter(w for s in user_lm_sentences for w in s.split())
    records = []
    for uid in sorted(refs):
        ref = list(refs[uid])
        wa, words_a = _ref_errors(ref, list(hyps_a[uid]))
        wb, words_b = _ref_errors(ref, list(hyps_b[uid]))
        i = 0
        while i < len(ref):
            if wa[i] == wb[i]:
                i += 1
                continue
            j = i
            while j < len(ref) and wa[j] != wb[j] and wa[j] == wa[i]:
                j += 1
            span_a = tuple(w for k in range(i, j) for w in words_a[k])
            span_b = tuple(w for k in range(i, j) for w in words_b[k])
            involved = dict.fromkeys(list(ref[i:j]) + list(span_a) + list(span_b))
            records.append(DiffRecord(
                uid, "W" if wa[i] else "L", tuple(ref[i:j]), span_a, span_b,
                tuple((w, vocab.get(w, 0)) for w in involved),
            ))
            i = j
    return records


def write_diffs(path: str | Path, records: Sequence[DiffRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("utterance_id\tW/L\treference\tsystem_a\tsystem_b\tcount_in_p13n_data\n")
        for r in records:
            counts = ", ".join(f"{w}: {c}" for w, c in r.counts)
            fh.write(f"{r.utterance_id}\t{r.label}\t{' '.join(r.reference)}\t{' '.join(r.hyp_a)}\t"
                     f"{' '.join(r.hyp_b)}\t{counts}\n")


def format_wer(value: float, ci: ConfidenceInterval | None = None) -> str:
    """Percent WER with one decimal, optionally followed by the interval."""
    text = f"{100 * value:.1f}"
    if ci is not None:
        text += f" [{100 * ci.lower:.1f}, {100 * ci.upper:.1f}]"
    return text
