"""Post-cutoff dataset construction and the fixed movie-pool sensitivity loop."""

from __future__ import annotations

import gzip
import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from narrec.corpus import CatalogEntry, CommunityRecs, Exclusion, Submission
from narrec.corpus import write_catalog, write_gold, write_submissions
from narrec.matching import EXACT, MatchMode, TitleIndex, best_match
from narrec.parsing import TitleYear, extract_json, parse_entry, parse_response
from narrec.prompting import ExampleSource, PromptTemplates, Strategy, render_bundle
from narrec.runner import Backend, BackendError, RunConfig, _complete
from narrec.util import content_hash, derive_seed

logger = logging.getLogger(__name__)

POOL_SIZE = 10


@dataclass(frozen=True)
class RawComment:
    id: str
    body: str
    score: int


@dataclass
class RawSubmission:
    id: str
    created_utc: int
    title: str
    selftext: str
    comments: list[RawComment] = field(default_factory=list)


@dataclass(frozen=True)
class FilterRules:
    start_utc: Optional[int] = None
    end_utc: Optional[int] = None
    keyword: str = "request"
    min_positive_comments: int = 5
    min_recommendations: int = 10
    require_movies_in_request: bool = True
    # net score a comment needs to count as having more up- than downvotes
    min_comment_score: int = 1

    def __post_init__(self):
        if self.min_positive_comments < 1 or self.min_recommendations < 1 or self.min_comment_score < 1:
            raise ValueError("filter thresholds must be positive")


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _iter_records(path: str | Path) -> Iterator[dict]:
    path = Path(path)
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                logger.warning("%s:%d: skipping malformed record", path, lineno)


def load_dump(submissions_path: str | Path, comments_path: str | Path) -> list[RawSubmission]:
    """Read Pushshift-style dumps (one JSON record per line, optionally gzipped).

    Submissions need ``id``, ``created_utc``, ``title`` and ``selftext``;
    comments need ``id``, ``link_id`` (``t3_<submission id>``), ``body`` and
    the net ``score``.
    """
    subs: dict[str, RawSubmission] = {}
    for rec in _iter_records(submissions_path):
        sid = str(rec.get("id", ""))
        if not sid:
            continue
        subs[sid] = RawSubmission(sid, int(float(rec.get("created_utc", 0))), rec.get("title") or "",
                                  rec.get("selftext") or "")
    for rec in _iter_records(comments_path):
        link = str(rec.get("link_id", ""))
        sid = link[3:] if link.startswith("t3_") else link
        if sid in subs:
            subs[sid].comments.append(RawComment(str(rec.get("id", "")), rec.get("body") or "",
                                                 int(rec.get("score") or 0)))
    return sorted(subs.values(), key=lambda s: (s.created_utc, s.id))


@dataclass
class FilterResult:
    candidates: list[RawSubmission]
    n_in_range: int
    n_keyword: int


def filter_candidates(raw: Iterable[RawSubmission], rules: FilterRules) -> FilterResult:
    """Keep in-range submissions whose title contains the keyword and that have
    enough positively scored comments."""
    keyword = rules.keyword.lower()
    n_in_range = n_keyword = 0
    kept = []
    for sub in raw:
        if rules.start_utc is not None and sub.created_utc < rules.start_utc:
            continue
        if rules.end_utc is not None and sub.created_utc > rules.end_utc:
            continue
        n_in_range += 1
        if keyword not in sub.title.lower():
            continue
        n_keyword += 1
        positive = sum(1 for c in sub.comments if c.score >= rules.min_comment_score)
        if positive >= rules.min_positive_comments:
            kept.append(sub)
    return FilterResult(kept, n_in_range, n_keyword)


# ---------------------------------------------------------------------------
# expert labeling

def tagger_system_prompt() -> str:
    return (resources.files("narrec") / "assets" / "tagger.txt").read_text(encoding="utf-8").strip()


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def tagger_user_prompt(sub: RawSubmission) -> str:
    parts = [f"<title>{_esc(sub.title)}</title>", f"<text>{_esc(sub.selftext)}</text>"]
    parts += [f'<comment id="{_esc(c.id)}">{_esc(c.body)}</comment>' for c in sub.comments]
    return "\n".join(parts)


@dataclass
class TaggedSubmission:
    submission_id: str
    request_movies: list[TitleYear] = field(default_factory=list)
    comment_movies: dict[str, list[TitleYear]] = field(default_factory=dict)
    needs_review: bool = False
    reply: Optional[str] = None

    @property
    def recommendations(self) -> list[TitleYear]:
        return [m for movies in self.comment_movies.values() for m in movies]


class ExpertCache:
    """Replies keyed by the content hash of the exact prompt pair, persisted as JSONL."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for rec in _iter_records(self.path):
                self._data[rec["hash"]] = rec["reply"]

    def get(self, key: str) -> Optional[str]:
        return self._data.get(key)

    def put(self, key: str, reply: str):
        with self._lock:
            self._data[key] = reply
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"hash": key, "reply": reply}, ensure_ascii=False) + "\n")

    def __len__(self):
        return len(self._data)


def _mentions(values) -> Optional[list[TitleYear]]:
    if not isinstance(values, list):
        return None
    out = []
    for v in values:
        entry = parse_entry(v) if isinstance(v, str) else None
        if entry is not None:
            out.append(entry)
    return out


def parse_expert_reply(submission_id: str, reply: Optional[str]) -> TaggedSubmission:
    doc = extract_json(reply)
    tagged = TaggedSubmission(submission_id, reply=reply)
    if doc is None:
        tagged.needs_review = True
        return tagged
    request = _mentions(doc.get("request_movies"))
    comments = doc.get("comment_movies")
    if request is None or not isinstance(comments, dict):
        tagged.needs_review = True
        return tagged
    tagged.request_movies = request
    for cid, movies in comments.items():
        parsed = _mentions(movies)
        if parsed is None:
            tagged.needs_review = True
            return TaggedSubmission(submission_id, needs_review=True, reply=reply)
        tagged.comment_movies[str(cid)] = parsed
    return tagged


def label_with_expert(sub: RawSubmission, backend: Backend, config: Optional[RunConfig] = None,
                      cache: Optional[ExpertCache] = None) -> TaggedSubmission:
    """Ask the expert model to tag movie mentions in a post and its comments."""
    config = config or RunConfig()
    system_text, user_text = tagger_system_prompt(), tagger_user_prompt(sub)
    key = content_hash(system_text, user_text)
    reply = cache.get(key) if cache else None
    if reply is None:
        try:
            reply, _ = _complete(backend, system_text, user_text, config)
        except BackendError as exc:
            logger.warning("expert labeling failed for %s: %s", sub.id, exc)
            return TaggedSubmission(sub.id, needs_review=True)
        if cache is not None:
            cache.put(key, reply)
    return parse_expert_reply(sub.id, reply)


# ---------------------------------------------------------------------------

@dataclass
class FinalDataset:
    submissions: list[Submission]
    community: dict[str, CommunityRecs]
    catalog: dict[str, CatalogEntry]
    excluded: list[Exclusion]

    def write(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_submissions(out / "submissions.jsonl", self.submissions)
        write_gold(out / "gold.jsonl", self.community)
        write_catalog(out / "catalog.jsonl", self.catalog)


def minted_id(movie: TitleYear) -> str:
    norm, year = movie.key
    return "ty" + content_hash(norm, str(year))[:12]


def finalize_dataset(labeled: Sequence[tuple[RawSubmission, TaggedSubmission]],
                     catalog: Optional[Mapping[str, CatalogEntry]] = None,
                     rules: FilterRules = FilterRules()) -> FinalDataset:
    """Resolve tagged mentions to ids and apply the request/recommendation thresholds.

    Mentions are resolved by exact title+year against ``catalog`` when given;
    anything unresolved gets a stable minted id and a catalog entry of its own.
    A candidate needs at least one request movie (if required) and at least
    ``min_recommendations`` distinct recommended movies not mentioned in the request.
    """
    index = TitleIndex(catalog.values()) if catalog else None
    out_catalog: dict[str, CatalogEntry] = {}
    aliases: dict[str, dict[str, None]] = defaultdict(dict)
    years: dict[str, int] = {}

    def resolve(movie: TitleYear) -> str:
        if index is not None:
            hit = best_match(movie.title, movie.year, index, EXACT)
            if hit:
                out_catalog[hit[0]] = catalog[hit[0]]
                return hit[0]
        mid = minted_id(movie)
        aliases[mid][movie.title] = None
        years[mid] = movie.year
        return mid

    submissions, community, excluded = [], {}, []
    for raw, tagged in labeled:
        if tagged.needs_review:
            excluded.append(Exclusion(raw.id, "needs manual review"))
            continue
        request_ids = frozenset(resolve(m) for m in tagged.request_movies)
        rec_ids = [resolve(m) for m in tagged.recommendations]
        distinct = set(rec_ids) - request_ids
        if rules.require_movies_in_request and not request_ids:
            excluded.append(Exclusion(raw.id, "no movies in request"))
            continue
        if len(distinct) < rules.min_recommendations:
            excluded.append(Exclusion(raw.id, f"fewer than {rules.min_recommendations} recommendations"))
            continue
        if not request_ids:
            # corpus submissions need a positive mention; such posts cannot be kept
            excluded.append(Exclusion(raw.id, "no movies in request"))
            continue
        submissions.append(Submission(raw.id, raw.created_utc, raw.title, raw.selftext, request_ids))
        community[raw.id] = CommunityRecs(raw.id, tuple(rec_ids), len(raw.comments))

    used = {m for s in submissions for m in s.pos_movies} | {m for r in community.values() for m in r.movie_ids}
    for mid, names in aliases.items():
        if mid in used and mid not in out_catalog:
            out_catalog[mid] = CatalogEntry(mid, years[mid], tuple(names))
    out_catalog = {k: v for k, v in out_catalog.items() if k in used}
    submissions.sort(key=lambda s: (s.created_utc, s.id))
    return FinalDataset(submissions, community, out_catalog, excluded)


# ---------------------------------------------------------------------------
# fixed movie pool

@dataclass
class PoolResult:
    submission_id: str
    movie_ids: list[str]
    iterations: int
    shortfall: bool


def constrain_to_pool(submission: Submission, pool: TitleIndex | Mapping[str, CatalogEntry], backend: Backend,
                      config: Optional[RunConfig] = None, strategy: Strategy = Strategy("zero_shot"),
                      max_iterations: int = 10, seed: int = 0, mode: MatchMode = EXACT,
                      example_pool: Sequence[ExampleSource] = (),
                      templates: Optional[PromptTemplates] = None) -> PoolResult:
    """Re-ask until ten distinct in-pool movies are collected (first-seen order)."""
    config = config or RunConfig()
    index = pool if isinstance(pool, TitleIndex) else TitleIndex(pool.values())
    collected: list[str] = []
    seen: set[str] = set()
    iterations = 0
    while len(collected) < POOL_SIZE and iterations < max_iterations:
        bundle = render_bundle(strategy, submission, example_pool, iterations, templates)
        iterations += 1
        try:
            text, _ = _complete(backend, bundle.system_text, bundle.user_text, config)
        except BackendError as exc:
            logger.warning("pool request %d for %s failed: %s", iterations, submission.id, exc)
            continue
        parsed = parse_response(text, derive_seed(seed, submission.id, iterations))
        for entry in parsed.entries:
            hit = best_match(entry.title, entry.year, index, mode)
            if hit and hit[0] not in seen:
                seen.add(hit[0])
                collected.append(hit[0])
                if len(collected) == POOL_SIZE:
                    break
    return PoolResult(submission.id, collected, iterations, len(collected) < POOL_SIZE)
