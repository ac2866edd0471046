"""Entity-level micro precision/recall/F1 and percentile-bootstrap intervals.

Matching is strict: a predicted span counts as a true positive only if an
unmatched gold span with identical (start, end, type) exists in the same
sentence. The bootstrap resamples sentences (the independent sampling unit),
drawing one ``rng.integers(0, n, size=n)`` index batch per resample from
``numpy.random.default_rng(seed)`` so runs replay bit-exactly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import EntitySpan
from .errors import EvaluationError

METRICS = ("precision", "recall", "f1")


@dataclass(frozen=True)
class SentenceCounts:
    sentence_id: str
    tp: int
    fp: int
    fn: int


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    n_boot: int = 0
    seed: int | None = None
    level: float = 0.95
    support: int = 0
    predicted: int = 0

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "ci": {m: list(b) for m, b in self.ci.items()},
            "n_boot": self.n_boot, "seed": self.seed, "level": self.level,
            "support": self.support, "predicted": self.predicted,
        }


@dataclass
class CorpusScore:
    tp: int
    fp: int
    fn: int
    report: MetricReport
    per_sentence: tuple[SentenceCounts, ...]


def match_sentence(gold: Sequence[EntitySpan], pred: Sequence[EntitySpan]) -> tuple[int, int, int]:
    """One-to-one strict matching within a sentence."""
    tp = sum((Counter(gold) & Counter(pred)).values())
    return tp, len(pred) - tp, len(gold) - tp


def micro_prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def score_corpus(gold: Mapping[str, Sequence[EntitySpan]],
                 pred: Mapping[str, Sequence[EntitySpan]]) -> CorpusScore:
    if set(gold) != set(pred):
        only_gold = sorted(set(gold) - set(pred))[:3]
        only_pred = sorted(set(pred) - set(gold))[:3]
        raise EvaluationError(
            f"gold/pred sentence ids differ (gold-only {only_gold}, pred-only {only_pred})")
    per_sentence = []
    for sid in sorted(gold):
        tp, fp, fn = match_sentence(gold[sid], pred[sid])
        per_sentence.append(SentenceCounts(sid, tp, fp, fn))
    tp = sum(c.tp for c in per_sentence)
    fp = sum(c.fp for c in per_sentence)
    fn = sum(c.fn for c in per_sentence)
    precision, recall, f1 = micro_prf(tp, fp, fn)
    report = MetricReport(precision=precision, recall=recall, f1=f1,
                          support=tp + fn, predicted=tp + fp)
    return CorpusScore(tp=tp, fp=fp, fn=fn, report=report,
                       per_sentence=tuple(per_sentence))


def percentile(sorted_values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile over pre-sorted values, q in [0, 1]."""
    m = len(sorted_values)
    if m == 1:
        return sorted_values[0]
    h = (m - 1) * q
    lo = math.floor(h)
    hi = math.ceil(h)
    frac = h - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


def bootstrap_ci(per_sentence_counts: Sequence[SentenceCounts] | Sequence[tuple[int, int, int]],
                 n_boot: int, seed: int, level: float = 0.95) -> dict[str, tuple[float, float]]:
    """Percentile bounds for micro P/R/F1 over sentence resamples."""
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    rows = [(c.tp, c.fp, c.fn) if isinstance(c, SentenceCounts) else tuple(c)
            for c in per_sentence_counts]
    if not rows:
        raise ValueError("need at least one sentence")
    counts = np.asarray(rows, dtype=np.int64)
    n = counts.shape[0]
    rng = np.random.default_rng(seed)
    stats: dict[str, list[float]] = {m: [] for m in METRICS}
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        tp, fp, fn = counts[idx].sum(axis=0)
        p, r, f = micro_prf(int(tp), int(fp), int(fn))
        stats["precision"].append(p)
        stats["recall"].append(r)
        stats["f1"].append(f)
    lo_q = (1 - level) / 2
    hi_q = 1 - lo_q
    bounds = {}
    for metric, values in stats.items():
        ordered = sorted(values)
        bounds[metric] = (percentile(ordered, lo_q), percentile(ordered, hi_q))
    return bounds


def evaluate(gold: Mapping[str, Sequence[EntitySpan]],
             pred: Mapping[str, Sequence[EntitySpan]],
             n_boot: int = 1000, seed: int = 42, level: float = 0.95) -> MetricReport:
    """Score and attach bootstrap intervals in one call."""
    score = score_corpus(gold, pred)
    ci = bootstrap_ci(score.per_sentence, n_boot=n_boot, seed=seed, level=level)
    report = score.report
    report.ci = ci
    report.n_boot = n_boot
    report.seed = seed
    report.level = level
    return report


@dataclass
class AggregateReport:
    precision: float
    recall: float
    f1: float
    runs: tuple[MetricReport, ...]
    identical_runs: bool = False

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "identical_runs": self.identical_runs,
            "runs": [r.as_dict() for r in self.runs],
        }


def aggregate_runs(reports: Sequence[MetricReport]) -> AggregateReport:
    """Arithmetic mean of run-level P/R/F1 (matching published AVG rows);
    per-run reports are retained."""
    if not reports:
        raise ValueError("need at least one run report")
    n = len(reports)
    identical = len({(r.precision, r.recall, r.f1) for r in reports}) == 1
    return AggregateReport(
        precision=math.fsum(r.precision for r in reports) / n,
        recall=math.fsum(r.recall for r in reports) / n,
        f1=math.fsum(r.f1 for r in reports) / n,
        runs=tuple(reports),
        identical_runs=identical and n > 1,
    )
