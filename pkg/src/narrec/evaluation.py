"""Ranking metrics at cut-off 10, macro aggregation, diversity and release-year histograms."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from narrec.stats import bootstrap_ci

CUTOFF = 10
METRICS = ("precision", "recall", "f1", "ndcg")


@dataclass(frozen=True)
class RequestScore:
    precision: float
    recall: float
    f1: float
    ndcg: float
    n_hits: int
    gold_size: int
    # hits / returned entries, the list-length-conditioned variant
    precision_by_length: float = 0.0

    @classmethod
    def zero(cls, gold_size: int) -> "RequestScore":
        return cls(0.0, 0.0, 0.0, 0.0, 0, gold_size, 0.0)


def _dcg(ranks: Iterable[int]) -> float:
    return sum(1.0 / math.log2(r + 1) for r in ranks)


def ideal_dcg(gold_size: int, k: int = CUTOFF) -> float:
    return _dcg(range(1, min(k, gold_size) + 1))


def score_request(outcome, gold, k: int = CUTOFF) -> RequestScore:
    """Precision/Recall/F1/NDCG@k of one matched list against a gold set.

    ``outcome`` is a MatchOutcome (or a plain sequence of optional ids in rank
    order); ``gold`` a GoldSet or a set of ids.
    """
    movie_ids = list(getattr(outcome, "movie_ids", outcome))[:k]
    items = getattr(gold, "items", gold)
    if not items:
        raise ValueError("gold set is empty")
    seen: set[str] = set()
    hit_ranks = []
    for rank, movie_id in enumerate(movie_ids, start=1):
        if movie_id is None or movie_id in seen:
            continue
        seen.add(movie_id)
        if movie_id in items:
            hit_ranks.append(rank)
    n_hits = len(hit_ranks)
    precision = n_hits / k
    recall = n_hits / len(items)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    ndcg = _dcg(hit_ranks) / ideal_dcg(len(items), k)
    by_length = n_hits / len(movie_ids) if movie_ids else 0.0
    return RequestScore(precision, recall, f1, ndcg, n_hits, len(items), by_length)


def recall_cap(gold_size: int, k: int = CUTOFF) -> float:
    return min(k, gold_size) / gold_size


def f1_cap(gold_size: int, k: int = CUTOFF) -> float:
    p = min(k, gold_size) / k
    r = recall_cap(gold_size, k)
    return 2 * p * r / (p + r)


def score_caps(gold_sizes: Sequence[int], k: int = CUTOFF) -> tuple[float, float]:
    """Mean best-achievable Recall@k and F1@k over a set of requests."""
    if not gold_sizes:
        raise ValueError("no gold sets")
    rc = [recall_cap(g, k) for g in gold_sizes]
    fc = [f1_cap(g, k) for g in gold_sizes]
    return sum(rc) / len(rc), sum(fc) / len(fc)


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class AggregateScore:
    precision: MetricSummary
    recall: MetricSummary
    f1: MetricSummary
    ndcg: MetricSummary
    n: int

    def __getitem__(self, metric: str) -> MetricSummary:
        return getattr(self, metric)


def macro_average(scores: Sequence[RequestScore], n_resamples: int = 10_000, seed: int = 0,
                  level: float = 0.95) -> AggregateScore:
    """Unweighted mean per metric with a percentile bootstrap interval over requests."""
    if not scores:
        raise ValueError("macro_average needs at least one score")
    parts = {}
    for metric in METRICS:
        values = [getattr(s, metric) for s in scores]
        low, high = bootstrap_ci(values, n_resamples=n_resamples, level=level, seed=seed)
        parts[metric] = MetricSummary(float(np.mean(values)), low, high)
    return AggregateScore(n=len(scores), **parts)


def jaccard_distance(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return 1.0 - len(a & b) / len(union)


def _as_key_set(items) -> frozenset:
    keys = set()
    for item in items:
        if hasattr(item, "key"):
            keys.add(item.key)
        elif isinstance(item, str):
            keys.add(" ".join(item.casefold().split()))
        else:
            keys.add(item)
    return frozenset(keys)


def list_diversity(repetitions: Sequence[Iterable]) -> float:
    """Mean pairwise Jaccard distance between the lists produced for one request."""
    if len(repetitions) < 2:
        raise ValueError("diversity needs at least two repetitions")
    sets = [_as_key_set(r) for r in repetitions]
    dists = [jaccard_distance(a, b) for a, b in itertools.combinations(sets, 2)]
    return sum(dists) / len(dists)


def inter_list_diversity(per_request: Mapping[str, Sequence[Iterable]], n_resamples: int = 10_000,
                         seed: int = 0) -> MetricSummary:
    """Mean over requests of ``list_diversity``, with a bootstrap interval over requests.

    Entries may be TitleYear objects, "title (year)" strings (compared
    case-insensitively) or movie ids.
    """
    if not per_request:
        raise ValueError("no requests")
    values = [list_diversity(reps) for _, reps in sorted(per_request.items())]
    low, high = bootstrap_ci(values, n_resamples=n_resamples, seed=seed)
    return MetricSummary(sum(values) / len(values), low, high)


@dataclass(frozen=True)
class YearHistogram:
    edges: tuple[int, ...]
    fractions: tuple[float, ...]
    counts: tuple[int, ...]
    n_out_of_range: int


def year_histogram(years: Iterable[int], bin_width: int = 5, start: int = 1950,
                   end: int = 2025) -> YearHistogram:
    """Fraction of recommended movies per release-year bin.

    Bins are [start, start+w), ... with the last bin closed at ``end``.
    """
    years = np.asarray(list(years), dtype=float)
    edges = np.arange(start, end + bin_width, bin_width)
    edges = edges[edges <= end]
    if edges[-1] != end:
        edges = np.append(edges, end)
    in_range = (years >= start) & (years <= end)
    counts, _ = np.histogram(years[in_range], bins=edges)
    total = counts.sum()
    fractions = counts / total if total else np.zeros(len(counts))
    return YearHistogram(edges=tuple(int(e) for e in edges), fractions=tuple(float(f) for f in fractions),
                         counts=tuple(int(c) for c in counts), n_out_of_range=int((~in_range).sum()))


def select_median_repetition(values: Sequence[float], even: str = "error") -> int:
    """Index of the repetition whose corpus-mean F1 is the median (lowest index on ties).

    With an even count ``even`` picks the policy: "error", "lower" or "upper"
    middle value.
    """
    n = len(values)
    if n == 0:
        raise ValueError("no repetitions")
    ordered = sorted(values)
    if n % 2:
        target = ordered[n // 2]
    elif even == "lower":
        target = ordered[n // 2 - 1]
    elif even == "upper":
        target = ordered[n // 2]
    else:
        raise ValueError(f"{n} repetitions: median repetition is ambiguous for an even count; "
                         "choose an explicit policy ('lower' or 'upper')")
    return list(values).index(target)
