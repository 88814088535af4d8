"""Command line entry point.

Subcommands: ingest, run, score, stats, diversity, report, robustness-build,
sensitivity. Options can also come from a YAML file given with ``--config``;
explicit flags win over the file, the file wins over built-in defaults.

Exit codes: 0 success, 1 validation error, 2 partial failures in the run log.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import yaml

from narrec import __version__
from narrec.corpus import (CorpusError, build_gold, dataset_stats, load_catalog, load_corpus, load_gold,
                           load_submissions)
from narrec.matching import MatchMode, TitleIndex
from narrec.prompting import PromptTemplates, Strategy, build_example_pool
from narrec.runner import ModelSpec, RunConfig, make_backend, model_registry, read_log, run_plan
from narrec import report as rp
from narrec import robustness as rb
from narrec.evaluation import macro_average, score_request

logger = logging.getLogger("narrec")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing

def _corpus_args(p: argparse.ArgumentParser):
    p.add_argument("--submissions", help="submissions.jsonl")
    p.add_argument("--gold", help="gold.jsonl (community recommendations)")
    p.add_argument("--catalog", help="catalog.jsonl (multilingual titles)")
    p.add_argument("--min-gold", type=int, default=10, help="minimum gold-set size for admission")


def _scoring_args(p: argparse.ArgumentParser):
    p.add_argument("--log", help="run log (JSONL)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0, help="seed for list capping and bootstrap")
    p.add_argument("--resamples", type=int, default=10_000, help="bootstrap resamples")
    p.add_argument("--match", choices=("exact", "soft"), default="exact")
    p.add_argument("--threshold", type=float, default=0.9, help="soft-match similarity threshold")
    p.add_argument("--match-full-string", action="store_true",
                   help="soft-match on 'title (year)' strings instead of requiring an exact year")
    p.add_argument("--strict-json", action="store_true", help="disable JSON recovery from wrapped output")
    p.add_argument("--even-policy", choices=("error", "lower", "upper"), default="lower",
                   help="median repetition choice for an even repetition count")


def _run_args(p: argparse.ArgumentParser):
    p.add_argument("--models", nargs="+", help="model names (registry or config model_defs)")
    p.add_argument("--strategies", nargs="+", default=["zero_shot"],
                   help="zero_shot | identity:<persona> | few_shot:<1|5|10>")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--strategy-repetitions", type=json.loads, default={},
                   help='JSON object of per-strategy repetitions, e.g. \'{"zero_shot": 30}\'')
    p.add_argument("--context-window", type=int, default=4096)
    p.add_argument("--max-tokens", type=int, default=500)
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--retry-limit", type=int, default=3)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--backoff", type=float, default=1.0, help="base backoff in seconds")
    p.add_argument("--base-url", help="backend base URL (overrides per-backend defaults)")
    p.add_argument("--prompt-seed", type=int, default=0, help="seed for few-shot example draws")
    p.add_argument("--train-submissions", help="training split used as few-shot example source")
    p.add_argument("--train-gold", help="gold records of the training split")
    p.add_argument("--templates", help="directory with prompt template assets")
    p.add_argument("--limit", type=int, help="only use the first N admitted submissions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narrec",
                                     description="Evaluate chat models as narrative-driven movie recommenders.")
    parser.add_argument("--version", action="version", version=f"narrec {__version__}")
    parser.add_argument("--config", help="YAML file with option values")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate the corpus and write the eligibility manifest")
    _corpus_args(p)
    p.add_argument("--out", default="out")

    p = sub.add_parser("run", help="query models for every cell of the experiment grid")
    _corpus_args(p)
    _run_args(p)
    p.add_argument("--log", help="run log (JSONL), appended to and resumed")

    for name, help_text in (("score", "parse, match and score logged responses"),
                            ("stats", "repeated-measures ANOVA across repetitions"),
                            ("diversity", "inter-list diversity across repetitions"),
                            ("report", "all tables, plot data and a text summary")):
        p = sub.add_parser(name, help=help_text)
        _corpus_args(p)
        _scoring_args(p)

    p = sub.add_parser("robustness-build", help="build a post-cutoff dataset from raw dumps")
    p.add_argument("--dump-submissions", help="raw submission records (JSONL, optionally .gz)")
    p.add_argument("--dump-comments", help="raw comment records (JSONL, optionally .gz)")
    p.add_argument("--start", help="first day (YYYY-MM-DD, UTC)")
    p.add_argument("--end", help="last day (YYYY-MM-DD, UTC, inclusive)")
    p.add_argument("--keyword", default="request")
    p.add_argument("--min-positive-comments", type=int, default=5)
    p.add_argument("--min-recommendations", type=int, default=10)
    p.add_argument("--expert-model", default="GPT-4o")
    p.add_argument("--base-url")
    p.add_argument("--cache", help="expert reply cache (JSONL)")
    p.add_argument("--catalog", help="optional catalog for resolving tagged titles")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--out", default="robustness")

    p = sub.add_parser("sensitivity", help="fixed movie-pool experiment")
    _corpus_args(p)
    p.add_argument("--pool", help="movie pool in catalog.jsonl format")
    p.add_argument("--model", help="model name")
    p.add_argument("--strategy", default="identity:reddit_user")
    p.add_argument("--max-iterations", type=int, default=10)
    p.add_argument("--base-url")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resamples", type=int, default=10_000)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", default="out")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    file_values: dict = {}
    if known.config:
        path = Path(known.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        file_values = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(file_values, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
    # file values become the defaults, so explicit flags still take precedence
    parser.set_defaults(**file_values)
    for action in parser._subparsers._group_actions:
        for subparser in action.choices.values():
            subparser.set_defaults(**file_values)
    args = parser.parse_args(argv)
    args.model_defs = file_values.get("model_defs", [])
    return args


# ---------------------------------------------------------------------------
# helpers

def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise ValidationError(f"--{name.replace('_', '-')} is required")


def _load_corpus(args):
    _require(args, "submissions", "gold", "catalog")
    return load_corpus(args.submissions, args.gold, args.catalog, min_gold=args.min_gold)


def resolve_models(names: Sequence[str], model_defs: Sequence[dict] = ()) -> list[ModelSpec]:
    known = model_registry()
    for d in model_defs:
        spec = ModelSpec(**d)
        known[spec.name] = spec
    unknown = [n for n in names if n not in known]
    if unknown:
        raise ValidationError(f"unknown model name(s): {unknown}")
    return [known[n] for n in names]


def _known_models(model_defs) -> dict[str, ModelSpec]:
    known = model_registry()
    for d in model_defs or ():
        spec = ModelSpec(**d)
        known[spec.name] = spec
    return known


def _settings(args) -> rp.ScoreSettings:
    mode = MatchMode(args.match, args.threshold, args.match_full_string)
    return rp.ScoreSettings(seed=args.seed, n_resamples=args.resamples, mode=mode,
                            strict_json=args.strict_json, even_policy=args.even_policy)


def _date(text: Optional[str], end: bool = False) -> Optional[int]:
    if not text:
        return None
    day = dt.datetime.strptime(text, "%Y-%m-%d").replace(tzinfo=dt.timezone.utc)
    if end:
        day += dt.timedelta(days=1, seconds=-1)
    return int(day.timestamp())


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    corpus = _load_corpus(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = corpus.manifest()
    stats = dataset_stats(corpus.submissions, corpus.community)
    manifest["stats"] = stats.__dict__
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"admitted {manifest['n_admitted']} submissions, excluded {manifest['n_excluded']}")
    for e in corpus.excluded:
        print(f"  excluded {e.submission_id}: {e.reason}")
    print(f"unique mentioned movies: {stats.n_unique_mentioned}, distinct suggested: "
          f"{stats.n_distinct_suggested}, recommendations: {stats.n_recommendations}")
    return EXIT_OK


def cmd_run(args) -> int:
    _require(args, "log", "models")
    models = resolve_models(args.models, args.model_defs)
    strategies = [Strategy.parse(s, seed=args.prompt_seed) for s in args.strategies]
    corpus = _load_corpus(args)
    subs = corpus.submissions[: args.limit] if args.limit else corpus.submissions
    config = RunConfig(context_window_tokens=args.context_window, max_response_tokens=args.max_tokens,
                       repetitions=args.repetitions, strategy_repetitions=dict(args.strategy_repetitions or {}),
                       max_in_flight=args.max_in_flight, retry_limit=args.retry_limit, timeout_s=args.timeout,
                       backoff_base_s=args.backoff)
    templates = PromptTemplates(args.templates) if args.templates else None

    pool = []
    if any(s.kind == "few_shot" for s in strategies):
        _require(args, "train_submissions", "train_gold")
        train = load_submissions(args.train_submissions)
        train_gold = load_gold(args.train_gold)
        golds = {s.id: build_gold(s, train_gold[s.id].movie_ids) for s in train if s.id in train_gold}
        test_ids = frozenset(s.id for s in corpus.submissions)
        pool = build_example_pool(train, golds, corpus.catalog, seed=args.prompt_seed, exclude_ids=test_ids)
        need = max(s.n_examples for s in strategies if s.kind == "few_shot")
        if len(pool) < need:
            raise ValidationError(f"few-shot example pool has {len(pool)} entries, {need} needed")

    backends = {m.name: make_backend(m, args.base_url) for m in models}

    def progress(done, total):
        print(f"\r{done}/{total} cells", end="", file=sys.stderr, flush=True)

    rows = run_plan(models, strategies, subs, config, args.log, backends, pool, templates, progress)
    print(file=sys.stderr)
    wanted = {m.name for m in models}
    failed = [r for r in rows if r.failed and r.model in wanted]
    print(f"log complete: {len(rows)} rows, {len(failed)} failed requests")
    if failed:
        kinds: dict[str, int] = {}
        for r in failed:
            kinds[r.error["kind"]] = kinds.get(r.error["kind"], 0) + 1
        print("failures by kind: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
        return EXIT_PARTIAL
    return EXIT_OK


def _scored(args):
    _require(args, "log")
    if not Path(args.log).exists():
        raise ValidationError(f"run log not found: {args.log}")
    corpus = _load_corpus(args)
    log_header, rows = read_log(args.log)
    if not rows:
        raise ValidationError("no responses in run log")
    settings = _settings(args)
    scored = rp.score_log(corpus, rows, settings)
    if not scored:
        raise ValidationError("no responses for admitted submissions")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return scored, settings, rp.make_header(log_header, settings), out, _known_models(args.model_defs)


def _exit_for(scored) -> int:
    return EXIT_PARTIAL if any(s.row.failed for s in scored) else EXIT_OK


def _write_score_outputs(scored, settings, header, out):
    rp.write_parsed(out / "parsed.jsonl", header, scored)
    rp.write_matches(out / "matches.jsonl", header, scored)
    rp.write_scores(out / "scores.csv", header, scored)
    reports = rp.format_reports(scored, settings)
    rp.write_format_report(out / "format_report.csv", header, reports)
    return reports


def cmd_score(args) -> int:
    scored, settings, header, out, _ = _scored(args)
    _write_score_outputs(scored, settings, header, out)
    print(f"scored {len(scored)} responses -> {out}")
    return _exit_for(scored)


def cmd_stats(args) -> int:
    scored, settings, header, out, _ = _scored(args)
    rows, threshold = rp.anova_table(scored, settings)
    rp.write_csv(out / "anova.csv", header, rp.ANOVA_COLUMNS, rows)
    print(f"{len(rows)} ANOVA tests, Bonferroni level {threshold:.3g}; "
          f"{sum(r[-1] for r in rows)} significant")
    return _exit_for(scored)


def cmd_diversity(args) -> int:
    scored, settings, header, out, _ = _scored(args)
    rows = rp.diversity_table(scored, settings)
    rp.write_csv(out / "diversity.csv", header, rp.DIVERSITY_COLUMNS, rows)
    print(f"diversity for {len(rows)} model/strategy cells -> {out / 'diversity.csv'}")
    return _exit_for(scored)


def cmd_report(args) -> int:
    scored, settings, header, out, models = _scored(args)
    reports = _write_score_outputs(scored, settings, header, out)
    cells = rp.cell_aggregates(scored, settings)
    agg_rows = rp.write_aggregate(out / "aggregate.csv", header, cells, models, settings)
    rp.write_group_aggregate(out / "aggregate_groups.csv", header, cells, models, settings)
    div_rows = rp.diversity_table(scored, settings)
    rp.write_csv(out / "diversity.csv", header, rp.DIVERSITY_COLUMNS, div_rows)
    year_rows = rp.years_table(scored, cells)
    rp.write_csv(out / "years.csv", header, rp.YEARS_COLUMNS, year_rows)
    anova_rows, threshold = rp.anova_table(scored, settings)
    rp.write_csv(out / "anova.csv", header, rp.ANOVA_COLUMNS, anova_rows)
    rp.write_csv(out / "plot_format.csv", header, rp.PLOT_COLUMNS, rp.plot_rows_format(reports))
    rp.write_csv(out / "plot_f1_family.csv", header, rp.PLOT_COLUMNS, rp.plot_rows_f1(agg_rows))
    rp.write_csv(out / "plot_diversity.csv", header, rp.PLOT_COLUMNS, rp.plot_rows_diversity(div_rows))
    rp.write_csv(out / "plot_years.csv", header, rp.PLOT_COLUMNS, rp.plot_rows_years(year_rows))
    text = rp.summary_text(agg_rows, threshold if anova_rows else None, len(scored),
                           sum(s.row.failed for s in scored))
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return _exit_for(scored)


def cmd_robustness_build(args) -> int:
    _require(args, "dump_submissions", "dump_comments")
    rules = rb.FilterRules(start_utc=_date(args.start), end_utc=_date(args.end, end=True), keyword=args.keyword,
                           min_positive_comments=args.min_positive_comments,
                           min_recommendations=args.min_recommendations)
    raw = rb.load_dump(args.dump_submissions, args.dump_comments)
    result = rb.filter_candidates(raw, rules)
    print(f"{result.n_in_range} submissions in range, {result.n_keyword} keyword hits, "
          f"{len(result.candidates)} candidates")
    spec = resolve_models([args.expert_model], args.model_defs)[0]
    backend = make_backend(spec, args.base_url)
    cache = rb.ExpertCache(args.cache)
    with ThreadPoolExecutor(max_workers=max(1, args.max_in_flight)) as pool:
        tagged = list(pool.map(lambda s: rb.label_with_expert(s, backend, RunConfig(), cache),
                               result.candidates))
    catalog = load_catalog(args.catalog) if args.catalog else None
    final = rb.finalize_dataset(list(zip(result.candidates, tagged)), catalog, rules)
    final.write(args.out)
    review = [t.submission_id for t in tagged if t.needs_review]
    print(f"final dataset: {len(final.submissions)} submissions -> {args.out}"
          + (f"; {len(review)} flagged for manual review" if review else ""))
    return EXIT_PARTIAL if review else EXIT_OK


def cmd_sensitivity(args) -> int:
    _require(args, "pool", "model")
    spec = resolve_models([args.model], args.model_defs)[0]
    strategy = Strategy.parse(args.strategy)
    corpus = _load_corpus(args)
    pool = TitleIndex(load_catalog(args.pool).values())
    backend = make_backend(spec, args.base_url)
    subs = corpus.submissions[: args.limit] if args.limit else corpus.submissions
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, scores = [], []
    for sub in subs:
        res = rb.constrain_to_pool(sub, pool, backend, RunConfig(), strategy, args.max_iterations, args.seed)
        results.append(res)
        scores.append(score_request(res.movie_ids, corpus.golds[sub.id]))
    with open(out / "pool_results.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.__dict__, sort_keys=True) + "\n")
    agg = macro_average(scores, args.resamples, args.seed)
    header = rp.OutputHeader("sensitivity", {"scoring": args.seed})
    rp.write_csv(out / "sensitivity.csv", header, ["model", "strategy", "n", "shortfalls"] + rp._metric_cols(),
                 [[spec.name, strategy.id, agg.n, sum(r.shortfall for r in results)] + rp._metric_vals(agg)])
    print(f"F1@10 {agg.f1.mean:.4f} [{agg.f1.ci_low:.4f}, {agg.f1.ci_high:.4f}] over {agg.n} requests")
    return EXIT_PARTIAL if any(r.shortfall for r in results) else EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "run": cmd_run,
    "score": cmd_score,
    "stats": cmd_stats,
    "diversity": cmd_diversity,
    "report": cmd_report,
    "robustness-build": cmd_robustness_build,
    "sensitivity": cmd_sensitivity,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (ValidationError, CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
