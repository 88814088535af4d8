"""Replay a run log through parsing, matching and scoring, and write the result tables.

Every CSV starts with ``#`` header lines carrying the plan hash, seeds and
tool version. Outputs are deterministic for a fixed log and seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from narrec import __version__
from narrec.corpus import Corpus
from narrec.evaluation import (METRICS, RequestScore, inter_list_diversity, macro_average, score_request,
                               select_median_repetition, year_histogram)
from narrec.matching import EXACT, MatchMode, MatchOutcome, TitleIndex, match_list
from narrec.parsing import FormatReport, ParsedList, format_report, parse_response
from narrec.runner import ModelSpec, RawResponse
from narrec.stats import bonferroni_threshold, rm_anova
from narrec.util import content_hash, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ScoreSettings:
    seed: int = 0
    n_resamples: int = 10_000
    mode: MatchMode = EXACT
    strict_json: bool = False
    even_policy: str = "lower"
    alpha: float = 0.05


@dataclass
class ScoredResponse:
    row: RawResponse
    parsed: ParsedList
    outcome: MatchOutcome
    score: RequestScore
    cutoff_year: int

    @property
    def model(self) -> str:
        return self.row.model

    @property
    def strategy(self) -> str:
        return self.row.strategy


def score_log(corpus: Corpus, rows: Iterable[RawResponse], settings: ScoreSettings = ScoreSettings()
              ) -> list[ScoredResponse]:
    """Parse, match and score every logged response for an admitted submission."""
    subs = corpus.by_id()
    indexes: dict[str, TitleIndex] = {}
    out = []
    skipped = 0
    for row in rows:
        sub = subs.get(row.submission_id)
        if sub is None:
            skipped += 1
            continue
        gold = corpus.golds[sub.id]
        seed = derive_seed(settings.seed, row.model, row.strategy, row.submission_id, row.repetition)
        parsed = parse_response(row.text, seed, strict=settings.strict_json)
        if sub.id not in indexes:
            indexes[sub.id] = TitleIndex.from_catalog(corpus.catalog, gold.items)
        outcome = match_list(parsed, indexes[sub.id], settings.mode)
        out.append(ScoredResponse(row, parsed, outcome, score_request(outcome, gold), sub.year))
    if skipped:
        logger.warning("%d logged responses refer to submissions outside the corpus; skipped", skipped)
    out.sort(key=lambda s: s.row.key)
    return out


def group_cells(scored: Sequence[ScoredResponse]) -> dict[tuple[str, str], list[ScoredResponse]]:
    groups: dict[tuple[str, str], list[ScoredResponse]] = defaultdict(list)
    for s in scored:
        groups[(s.model, s.strategy)].append(s)
    return dict(sorted(groups.items()))


def by_repetition(cell: Sequence[ScoredResponse]) -> dict[int, list[ScoredResponse]]:
    reps: dict[int, list[ScoredResponse]] = defaultdict(list)
    for s in cell:
        reps[s.row.repetition].append(s)
    return dict(sorted(reps.items()))


def median_repetition(cell: Sequence[ScoredResponse], even_policy: str = "lower") -> int:
    reps = by_repetition(cell)
    keys = list(reps)
    f1_means = [float(np.mean([s.score.f1 for s in reps[k]])) for k in keys]
    return keys[select_median_repetition(f1_means, even=even_policy)]


# ---------------------------------------------------------------------------
# table writers

@dataclass
class OutputHeader:
    plan_hash: str
    seeds: dict

    def lines(self) -> list[str]:
        return [f"# tool: narrec {__version__}",
                f"# plan_hash: {self.plan_hash}",
                f"# seeds: {json.dumps(self.seeds, sort_keys=True)}"]


def make_header(log_header: Mapping, settings: ScoreSettings) -> OutputHeader:
    plan_hash = content_hash(json.dumps(log_header, sort_keys=True))[:16]
    strategy_seeds = {s["id"]: s.get("seed", 0) for s in log_header.get("strategies", [])}
    return OutputHeader(plan_hash, {"scoring": settings.seed, "strategies": strategy_seeds,
                                    "match": settings.mode.label, "resamples": settings.n_resamples})


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(round(value, 12))
    if value is None:
        return ""
    return str(value)


def write_csv(path: str | Path, header: OutputHeader, columns: Sequence[str], rows: Iterable[Sequence]):
    buf = io.StringIO()
    for line in header.lines():
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_jsonl(path: str | Path, header: OutputHeader, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_header": {"plan_hash": header.plan_hash, "seeds": header.seeds,
                                         "tool": f"narrec {__version__}"}}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_csv_table(path: str | Path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv` (header comment lines skipped)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# individual outputs

def _key_fields(row: RawResponse) -> dict:
    return {"model": row.model, "strategy": row.strategy, "submission_id": row.submission_id,
            "repetition": row.repetition}


def write_parsed(path, header, scored: Sequence[ScoredResponse]):
    write_jsonl(path, header, ({**_key_fields(s.row), **s.parsed.to_json()} for s in scored))


def write_matches(path, header, scored: Sequence[ScoredResponse]):
    def rec(s: ScoredResponse):
        entries = [{"entry": str(e), "movie_id": m, "similarity": sim}
                   for e, m, sim in zip(s.parsed.entries, s.outcome.movie_ids, s.outcome.similarities)]
        return {**_key_fields(s.row), "mode": s.outcome.mode.label, "entries": entries}
    write_jsonl(path, header, (rec(s) for s in scored))


SCORE_COLUMNS = ("model", "strategy", "submission_id", "repetition", "precision", "recall", "f1", "ndcg",
                 "n_hits", "gold_size", "precision_by_length", "valid_json", "failed")


def write_scores(path, header, scored: Sequence[ScoredResponse]):
    write_csv(path, header, SCORE_COLUMNS,
              ((s.model, s.strategy, s.row.submission_id, s.row.repetition, s.score.precision, s.score.recall,
                s.score.f1, s.score.ndcg, s.score.n_hits, s.score.gold_size, s.score.precision_by_length,
                int(s.parsed.valid_json), int(s.row.failed)) for s in scored))


def format_reports(scored, settings: ScoreSettings) -> dict[tuple[str, str], FormatReport]:
    return {key: format_report([s.parsed for s in cell], [s.cutoff_year for s in cell],
                               n_resamples=settings.n_resamples, seed=settings.seed)
            for key, cell in group_cells(scored).items()}


def write_format_report(path, header, reports: Mapping[tuple[str, str], FormatReport]):
    cols = ["model", "strategy"]
    for name in FormatReport.FIELDS:
        cols += [name, f"{name}_low", f"{name}_high", f"{name}_n"]
    rows = []
    for (model, strategy), rep in reports.items():
        row = [model, strategy]
        for r in rep.as_dict().values():
            row += [r.value, r.ci_low, r.ci_high, r.n]
        rows.append(row)
    write_csv(path, header, cols, rows)


@dataclass
class CellAggregate:
    model: str
    strategy: str
    repetition: int
    scores: list[RequestScore]


def cell_aggregates(scored, settings: ScoreSettings) -> list[CellAggregate]:
    out = []
    for (model, strategy), cell in group_cells(scored).items():
        rep = median_repetition(cell, settings.even_policy)
        out.append(CellAggregate(model, strategy, rep, [s.score for s in cell if s.row.repetition == rep]))
    return out


def _metric_cols():
    cols = []
    for m in METRICS:
        cols += [m, f"{m}_low", f"{m}_high"]
    return cols


def _metric_vals(agg):
    vals = []
    for m in METRICS:
        vals += [agg[m].mean, agg[m].ci_low, agg[m].ci_high]
    return vals


def write_aggregate(path, header, cells: Sequence[CellAggregate], models: Mapping[str, ModelSpec],
                    settings: ScoreSettings):
    rows = []
    for c in cells:
        spec = models.get(c.model)
        agg = macro_average(c.scores, settings.n_resamples, settings.seed)
        rows.append([c.model, spec.family if spec else "", spec.size_category if spec else "", c.strategy,
                     c.repetition, agg.n] + _metric_vals(agg))
    write_csv(path, header, ["model", "family", "size_category", "strategy", "repetition", "n"] + _metric_cols(),
              rows)
    return rows


def _strategy_kind(strategy_id: str) -> str:
    return strategy_id.split(":", 1)[0]


def write_group_aggregate(path, header, cells: Sequence[CellAggregate], models: Mapping[str, ModelSpec],
                          settings: ScoreSettings):
    """Scores pooled by (size category | family) x strategy kind."""
    rows = []
    for group_by in ("size_category", "family"):
        pooled: dict[tuple[str, str], list[RequestScore]] = defaultdict(list)
        for c in cells:
            spec = models.get(c.model)
            label = getattr(spec, group_by) if spec else "unknown"
            pooled[(label, _strategy_kind(c.strategy))].extend(c.scores)
        for (label, kind), scores in sorted(pooled.items()):
            agg = macro_average(scores, settings.n_resamples, settings.seed)
            rows.append([group_by, label, kind, agg.n] + _metric_vals(agg))
    write_csv(path, header, ["group_by", "group", "strategy_kind", "n"] + _metric_cols(), rows)
    return rows


def diversity_table(scored, settings: ScoreSettings) -> list[list]:
    rows = []
    for (model, strategy), cell in group_cells(scored).items():
        reps = by_repetition(cell)
        if len(reps) < 2:
            continue
        per_request: dict[str, list] = defaultdict(list)
        for rep_rows in reps.values():
            for s in rep_rows:
                per_request[s.row.submission_id].append(s.parsed.entries)
        per_request = {k: v for k, v in per_request.items() if len(v) >= 2}
        if not per_request:
            continue
        d = inter_list_diversity(per_request, settings.n_resamples, settings.seed)
        rows.append([model, strategy, len(reps), len(per_request), d.mean, d.ci_low, d.ci_high])
    return rows


DIVERSITY_COLUMNS = ("model", "strategy", "repetitions", "n_requests", "diversity", "diversity_low",
                     "diversity_high")


def years_table(scored, cells: Sequence[CellAggregate]) -> list[list]:
    chosen = {(c.model, c.strategy, c.repetition) for c in cells}
    years: dict[tuple[str, str], list[int]] = defaultdict(list)
    for s in scored:
        if (s.model, s.strategy, s.row.repetition) in chosen:
            years[(s.model, s.strategy)].extend(e.year for e in s.parsed.entries)
    rows = []
    for (model, strategy), ys in sorted(years.items()):
        h = year_histogram(ys)
        for lo, hi, count, frac in zip(h.edges[:-1], h.edges[1:], h.counts, h.fractions):
            rows.append([model, strategy, lo, hi, count, frac])
        rows.append([model, strategy, "out_of_range", "", h.n_out_of_range, ""])
    return rows


YEARS_COLUMNS = ("model", "strategy", "bin_start", "bin_end", "count", "fraction")


def anova_table(scored, settings: ScoreSettings) -> tuple[list[list], float]:
    """Repeated-measures ANOVA over repetitions per model x strategy x metric."""
    tests = []
    for (model, strategy), cell in group_cells(scored).items():
        reps = by_repetition(cell)
        if len(reps) < 2:
            continue
        rep_keys = list(reps)
        per_sub: dict[str, dict[int, RequestScore]] = defaultdict(dict)
        for k in rep_keys:
            for s in reps[k]:
                per_sub[s.row.submission_id][k] = s.score
        complete = sorted(sid for sid, d in per_sub.items() if len(d) == len(rep_keys))
        if len(complete) < 2:
            continue
        if len(complete) < len(per_sub):
            logger.warning("%s/%s: %d submissions lack some repetitions; excluded from ANOVA",
                           model, strategy, len(per_sub) - len(complete))
        for metric in METRICS:
            matrix = [[getattr(per_sub[sid][k], metric) for k in rep_keys] for sid in complete]
            tests.append((model, strategy, metric, rm_anova(matrix)))
    threshold = bonferroni_threshold(settings.alpha, len(tests)) if tests else settings.alpha
    rows = [[model, strategy, metric, r.f_value, r.p_value, r.df_num, r.df_den, int(r.p_value < threshold)]
            for model, strategy, metric, r in tests]
    return rows, threshold


ANOVA_COLUMNS = ("model", "strategy", "metric", "f_value", "p_value", "df_num", "df_den", "significant")


def plot_rows_format(reports: Mapping[tuple[str, str], FormatReport]) -> list[list]:
    rows = []
    for (model, strategy), rep in reports.items():
        for name, r in rep.as_dict().items():
            rows.append([name, f"{model} | {strategy}", r.value, r.ci_low, r.ci_high])
    return rows


PLOT_COLUMNS = ("panel", "x", "y", "err_low", "err_high")


def plot_rows_f1(aggregate_rows) -> list[list]:
    # aggregate rows: model, family, size, strategy, rep, n, precision..., f1 at offset 12
    idx = 6 + 3 * METRICS.index("f1")
    return [[f"{r[1]} | {r[3]}", r[0], r[idx], r[idx + 1], r[idx + 2]] for r in aggregate_rows]


def plot_rows_diversity(div_rows) -> list[list]:
    return [["diversity", f"{r[0]} | {r[1]}", r[4], r[5], r[6]] for r in div_rows]


def plot_rows_years(year_rows) -> list[list]:
    return [[f"{r[0]} | {r[1]}", r[2], r[5], "", ""] for r in year_rows if r[2] != "out_of_range"]


def summary_text(aggregate_rows, threshold: Optional[float], n_responses: int, n_failed: int) -> str:
    lines = [f"responses scored: {n_responses} (failed requests: {n_failed})", "",
             f"{'model':<22} {'strategy':<26} {'rep':>3} {'F1@10':>8} {'95% CI':>19} {'NDCG@10':>8}"]
    f1 = 6 + 3 * METRICS.index("f1")
    nd = 6 + 3 * METRICS.index("ndcg")
    for r in aggregate_rows:
        lines.append(f"{r[0]:<22} {r[3]:<26} {r[4]:>3} {r[f1]:>8.4f} [{r[f1 + 1]:.4f}, {r[f1 + 2]:.4f}] "
                     f"{r[nd]:>8.4f}")
    if threshold is not None:
        lines += ["", f"Bonferroni-corrected significance level: {threshold:.3g}"]
    return "\n".join(lines) + "\n"
