"""Loading of the annotated request dataset, community gold sets and the title catalog.

All three inputs are line-delimited JSON (UTF-8)::

    submissions.jsonl  {"id", "created_utc", "title", "body", "pos_movies": [...],
                        "neg_movies": [...], "pos_keywords": [...], "neg_keywords": [...],
                        "genres": [...]}
    gold.jsonl         {"submission_id", "movie_ids": [...], "n_comments"?}
    catalog.jsonl      {"movie_id", "year", "aliases": [...]}

Catalog lines may also use the compact ``id | year | alias; alias`` form.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)

MIN_YEAR = 1870
DEFAULT_MIN_GOLD = 10


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Submission:
    id: str
    created_utc: int
    title: str
    body: str
    pos_movies: frozenset[str]
    neg_movies: frozenset[str] = frozenset()
    pos_keywords: frozenset[str] = frozenset()
    neg_keywords: frozenset[str] = frozenset()
    genres: frozenset[str] = frozenset()

    @property
    def year(self) -> int:
        return dt.datetime.fromtimestamp(self.created_utc, tz=dt.timezone.utc).year

    @property
    def mentioned(self) -> frozenset[str]:
        return self.pos_movies | self.neg_movies

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "created_utc": self.created_utc,
            "title": self.title,
            "body": self.body,
            "pos_movies": sorted(self.pos_movies),
            "neg_movies": sorted(self.neg_movies),
            "pos_keywords": sorted(self.pos_keywords),
            "neg_keywords": sorted(self.neg_keywords),
            "genres": sorted(self.genres),
        }


@dataclass(frozen=True)
class CatalogEntry:
    movie_id: str
    release_year: int
    aliases: tuple[str, ...]

    def to_json(self) -> dict:
        return {"movie_id": self.movie_id, "year": self.release_year, "aliases": list(self.aliases)}


@dataclass(frozen=True)
class CommunityRecs:
    """Raw community recommendation instances for one submission."""
    submission_id: str
    movie_ids: tuple[str, ...]
    n_comments: int | None = None

    def to_json(self) -> dict:
        out = {"submission_id": self.submission_id, "movie_ids": list(self.movie_ids)}
        if self.n_comments is not None:
            out["n_comments"] = self.n_comments
        return out


@dataclass(frozen=True)
class GoldSet:
    submission_id: str
    items: frozenset[str]
    raw_count: int

    @property
    def eligible(self) -> bool:
        return bool(self.items)


@dataclass(frozen=True)
class DatasetStats:
    n_submissions: int = 0
    n_unique_mentioned: int = 0
    n_comments: int = 0
    n_distinct_suggested: int = 0
    n_recommendations: int = 0


@dataclass(frozen=True)
class Exclusion:
    submission_id: str
    reason: str


@dataclass
class Corpus:
    """Submissions admitted to evaluation together with their gold sets."""
    submissions: list[Submission]
    catalog: dict[str, CatalogEntry]
    golds: dict[str, GoldSet]
    community: dict[str, CommunityRecs] = field(default_factory=dict)
    excluded: list[Exclusion] = field(default_factory=list)

    def by_id(self) -> dict[str, Submission]:
        return {s.id: s for s in self.submissions}

    def manifest(self) -> dict:
        return {
            "n_admitted": len(self.submissions),
            "n_excluded": len(self.excluded),
            "excluded": [{"submission_id": e.submission_id, "reason": e.reason} for e in self.excluded],
        }


# ---------------------------------------------------------------------------
# line readers

def _iter_json_lines(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise CorpusError("record is not a JSON object", path, lineno)
            yield lineno, obj


def _str_field(obj: dict, name: str, path, lineno, required: bool = True) -> str:
    if name not in obj:
        if required:
            raise CorpusError(f"missing field '{name}'", path, lineno)
        return ""
    value = obj[name]
    if not isinstance(value, str):
        raise CorpusError(f"field '{name}' must be a string", path, lineno)
    return value


def _str_set(obj: dict, name: str, path, lineno) -> frozenset[str]:
    value = obj.get(name, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CorpusError(f"field '{name}' must be a list of strings", path, lineno)
    return frozenset(value)


def _int_field(value, name: str, path, lineno) -> int:
    if isinstance(value, bool):
        raise CorpusError(f"field '{name}' must be an integer", path, lineno)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(value.strip())
        except ValueError:
            pass
    raise CorpusError(f"field '{name}' must be an integer, got {value!r}", path, lineno)


def parse_submission(obj: dict, path=None, lineno=None) -> Submission:
    sub = Submission(
        id=_str_field(obj, "id", path, lineno),
        created_utc=_int_field(obj.get("created_utc"), "created_utc", path, lineno),
        title=_str_field(obj, "title", path, lineno),
        body=_str_field(obj, "body", path, lineno, required=False),
        pos_movies=_str_set(obj, "pos_movies", path, lineno),
        neg_movies=_str_set(obj, "neg_movies", path, lineno),
        pos_keywords=_str_set(obj, "pos_keywords", path, lineno),
        neg_keywords=_str_set(obj, "neg_keywords", path, lineno),
        genres=_str_set(obj, "genres", path, lineno),
    )
    if not sub.id:
        raise CorpusError("field 'id' is empty", path, lineno)
    if not sub.pos_movies:
        raise CorpusError(f"submission {sub.id!r} has no positively mentioned movies (field 'pos_movies')",
                          path, lineno)
    return sub


def load_submissions(path: str | Path, date_range: tuple[int, int] | None = None) -> list[Submission]:
    """Load submissions sorted by creation time.

    ``date_range`` is an optional inclusive (start, end) unix-seconds window;
    records outside it are rejected.
    """
    path = Path(path)
    seen: dict[str, int] = {}
    subs = []
    for lineno, obj in _iter_json_lines(path):
        sub = parse_submission(obj, path, lineno)
        if sub.id in seen:
            raise CorpusError(f"duplicate submission id {sub.id!r} on lines {seen[sub.id]} and {lineno}",
                              path, lineno)
        seen[sub.id] = lineno
        if date_range is not None and not date_range[0] <= sub.created_utc <= date_range[1]:
            raise CorpusError(f"created_utc {sub.created_utc} outside declared date range {date_range}",
                              path, lineno)
        subs.append(sub)
    subs.sort(key=lambda s: (s.created_utc, s.id))
    return subs


def parse_catalog_line(line: str, path=None, lineno=None) -> CatalogEntry:
    """Parse one catalog record, either a JSON object or ``id | year | alias; alias``."""
    text = line.strip()
    if text.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON ({exc.msg})", path, lineno) from None
        movie_id = _str_field(obj, "movie_id", path, lineno)
        year_raw = obj.get("year")
        aliases = obj.get("aliases", [])
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise CorpusError("field 'aliases' must be a list of strings", path, lineno)
    else:
        parts = [p.strip() for p in text.split("|")]
        if len(parts) != 3:
            raise CorpusError("expected 'movie_id | year | alias; alias'", path, lineno)
        movie_id, year_raw, alias_text = parts
        aliases = alias_text.split(";")

    year = _int_field(year_raw, "year", path, lineno)
    if not MIN_YEAR <= year <= dt.date.today().year:
        raise CorpusError(f"release year {year} out of range", path, lineno)
    aliases = tuple(a.strip() for a in aliases if a.strip())
    if not movie_id:
        raise CorpusError("empty movie_id", path, lineno)
    if not aliases:
        raise CorpusError(f"catalog entry {movie_id!r} has no aliases", path, lineno)
    return CatalogEntry(movie_id=movie_id, release_year=year, aliases=aliases)


def load_catalog(path: str | Path) -> dict[str, CatalogEntry]:
    path = Path(path)
    catalog: dict[str, CatalogEntry] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            entry = parse_catalog_line(raw, path, lineno)
            if entry.movie_id in catalog:
                raise CorpusError(f"duplicate movie_id {entry.movie_id!r}", path, lineno)
            catalog[entry.movie_id] = entry
    return catalog


def load_gold(path: str | Path) -> dict[str, CommunityRecs]:
    path = Path(path)
    out: dict[str, CommunityRecs] = {}
    for lineno, obj in _iter_json_lines(path):
        sid = _str_field(obj, "submission_id", path, lineno)
        ids = obj.get("movie_ids")
        if not isinstance(ids, list) or not all(isinstance(m, str) for m in ids):
            raise CorpusError("field 'movie_ids' must be a list of strings", path, lineno)
        n_comments = obj.get("n_comments")
        if n_comments is not None:
            n_comments = _int_field(n_comments, "n_comments", path, lineno)
        if sid in out:
            raise CorpusError(f"duplicate gold record for submission {sid!r}", path, lineno)
        out[sid] = CommunityRecs(sid, tuple(ids), n_comments)
    return out


def build_gold(submission: Submission, community_recs: Iterable[str],
               catalog: Mapping[str, CatalogEntry] | None = None) -> GoldSet:
    """Deduplicated community recommendations minus everything the request mentions."""
    recs = list(community_recs)
    if catalog is not None:
        missing = sorted({m for m in recs if m not in catalog})
        if missing:
            raise CorpusError(f"submission {submission.id!r}: gold ids not in catalog: {missing[:5]}")
    items = frozenset(recs) - submission.mentioned
    return GoldSet(submission_id=submission.id, items=items, raw_count=len(recs))


def dataset_stats(submissions: Iterable[Submission],
                  community: Mapping[str, CommunityRecs] | None = None) -> DatasetStats:
    subs = list(submissions)
    community = community or {}
    mentioned: set[str] = set()
    suggested: set[str] = set()
    n_comments = 0
    n_recs = 0
    for sub in subs:
        mentioned |= sub.mentioned
        recs = community.get(sub.id)
        if recs is None:
            continue
        suggested.update(recs.movie_ids)
        n_recs += len(recs.movie_ids)
        n_comments += recs.n_comments or 0
    return DatasetStats(n_submissions=len(subs), n_unique_mentioned=len(mentioned),
                        n_comments=n_comments, n_distinct_suggested=len(suggested),
                        n_recommendations=n_recs)


def load_corpus(submissions_path: str | Path, gold_path: str | Path, catalog_path: str | Path,
                min_gold: int = DEFAULT_MIN_GOLD) -> Corpus:
    """Load all three files and admit only submissions with a usable gold set."""
    for p in (submissions_path, gold_path, catalog_path):
        if not Path(p).exists():
            raise CorpusError(f"input file not found: {p}")
    submissions = load_submissions(submissions_path)
    catalog = load_catalog(catalog_path)
    community = load_gold(gold_path)

    admitted, golds, excluded = [], {}, []
    for sub in submissions:
        recs = community.get(sub.id)
        if recs is None:
            excluded.append(Exclusion(sub.id, "no gold record"))
            continue
        gold = build_gold(sub, recs.movie_ids, catalog)
        if not gold.items:
            excluded.append(Exclusion(sub.id, "empty gold"))
        elif len(gold.items) < min_gold:
            excluded.append(Exclusion(sub.id, f"gold below {min_gold}"))
        else:
            admitted.append(sub)
            golds[sub.id] = gold
    for e in excluded:
        logger.info("excluded submission %s: %s", e.submission_id, e.reason)
    return Corpus(submissions=admitted, catalog=catalog, golds=golds, community=community,
                  excluded=excluded)


# ---------------------------------------------------------------------------
# writers

def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_submissions(path, submissions: Iterable[Submission]) -> None:
    _write_jsonl(path, (s.to_json() for s in submissions))


def write_catalog(path, catalog: Mapping[str, CatalogEntry] | Iterable[CatalogEntry]) -> None:
    entries = catalog.values() if isinstance(catalog, Mapping) else catalog
    _write_jsonl(path, (e.to_json() for e in sorted(entries, key=lambda e: e.movie_id)))


def write_gold(path, community: Mapping[str, CommunityRecs] | Iterable[CommunityRecs]) -> None:
    recs = community.values() if isinstance(community, Mapping) else community
    _write_jsonl(path, (r.to_json() for r in sorted(recs, key=lambda r: r.submission_id)))
