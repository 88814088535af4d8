"""Resolve recommended "title (year)" strings to catalog ids.

Exact mode compares normalized titles; soft mode uses Ratcliff/Obershelp
(gestalt) similarity against every alias of a candidate movie.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from narrec.corpus import CatalogEntry


def normalize_title(text: str) -> str:
    """Case-fold, trim and collapse internal whitespace runs."""
    return " ".join(text.casefold().split())


def _longest_block(a: str, b: str, alo: int, ahi: int, blo: int, bhi: int) -> tuple[int, int, int]:
    # Dynamic programming over common-suffix lengths. Among maximal blocks the
    # one starting earliest in a wins, then earliest in b.
    best_i, best_j, best = alo, blo, 0
    prev = [0] * (bhi - blo + 1)
    for i in range(alo, ahi):
        cur = [0] * (bhi - blo + 1)
        ai = a[i]
        for j in range(blo, bhi):
            if ai == b[j]:
                k = prev[j - blo] + 1
                cur[j - blo + 1] = k
                if k > best:
                    best, best_i, best_j = k, i - k + 1, j - k + 1
        prev = cur
    return best_i, best_j, best


def matching_blocks(a: str, b: str) -> list[tuple[int, int, int]]:
    """Matching blocks (i, j, size) of the recursive longest-common-substring decomposition."""
    blocks = []
    stack = [(0, len(a), 0, len(b))]
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        i, j, k = _longest_block(a, b, alo, ahi, blo, bhi)
        if k:
            blocks.append((i, j, k))
            if alo < i and blo < j:
                stack.append((alo, i, blo, j))
            if i + k < ahi and j + k < bhi:
                stack.append((i + k, ahi, j + k, bhi))
    blocks.sort()
    return blocks


def gestalt_similarity(a: str, b: str) -> float:
    """Ratcliff/Obershelp similarity 2*M / (|a| + |b|); two empty strings score 1."""
    total = len(a) + len(b)
    if total == 0:
        return 1.0
    matched = sum(k for _, _, k in matching_blocks(a, b))
    return 2.0 * matched / total


@dataclass(frozen=True)
class MatchMode:
    kind: str = "exact"
    threshold: float = 0.9
    # compare "title (year)" strings instead of requiring an exact year
    full_string: bool = False

    def __post_init__(self):
        if self.kind not in ("exact", "soft"):
            raise ValueError(f"unknown match mode {self.kind!r}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")

    @property
    def label(self) -> str:
        if self.kind == "exact":
            return "exact"
        return f"soft@{self.threshold:g}" + ("+year" if self.full_string else "")


EXACT = MatchMode("exact")


@dataclass
class MatchOutcome:
    movie_ids: list[Optional[str]]
    similarities: list[Optional[float]]
    mode: MatchMode = EXACT

    @property
    def hits(self) -> list[str]:
        return [m for m in self.movie_ids if m is not None]


class TitleIndex:
    """Alias lookup structure over a set of catalog entries."""

    def __init__(self, entries: Iterable[CatalogEntry]):
        self.exact: dict[tuple[str, int], list[str]] = defaultdict(list)
        self.by_year: dict[int, list[tuple[str, str]]] = defaultdict(list)
        self.full: list[tuple[str, str]] = []
        self.ids: set[str] = set()
        for entry in entries:
            self.ids.add(entry.movie_id)
            for alias in dict.fromkeys(normalize_title(a) for a in entry.aliases):
                self.exact[(alias, entry.release_year)].append(entry.movie_id)
                self.by_year[entry.release_year].append((alias, entry.movie_id))
                self.full.append((f"{alias} ({entry.release_year})", entry.movie_id))
        for ids in self.exact.values():
            ids.sort()

    @classmethod
    def from_catalog(cls, catalog: Mapping[str, CatalogEntry], ids: Iterable[str] | None = None) -> "TitleIndex":
        if ids is None:
            return cls(catalog.values())
        return cls(catalog[m] for m in ids if m in catalog)

    def __len__(self) -> int:
        return len(self.ids)


def best_match(title: str, year: int, index: TitleIndex, mode: MatchMode = EXACT) -> tuple[str, float] | None:
    """Best (movie_id, similarity) for one entry, or None."""
    norm = normalize_title(title)
    if mode.kind == "exact":
        ids = index.exact.get((norm, year))
        return (ids[0], 1.0) if ids else None

    if mode.full_string:
        query = f"{norm} ({year})"
        candidates = index.full
    else:
        query = norm
        candidates = index.by_year.get(year, [])
    best: dict[str, float] = {}
    for alias, movie_id in candidates:
        sim = gestalt_similarity(query, alias)
        if sim > best.get(movie_id, -1.0):
            best[movie_id] = sim
    if not best:
        return None
    movie_id, sim = min(best.items(), key=lambda kv: (-kv[1], kv[0]))
    if sim < mode.threshold:
        return None
    return movie_id, sim


def _as_index(catalog) -> TitleIndex:
    return catalog if isinstance(catalog, TitleIndex) else TitleIndex.from_catalog(catalog)


def match_entry(entry, catalog, mode: MatchMode = EXACT) -> Optional[str]:
    """Movie id for a parsed entry (anything with ``title`` and ``year``), or None."""
    hit = best_match(entry.title, entry.year, _as_index(catalog), mode)
    return hit[0] if hit else None


def match_list(entries, catalog, mode: MatchMode = EXACT) -> MatchOutcome:
    """Element-wise matching; repeated ids after the first occurrence become misses."""
    index = _as_index(catalog)
    ids: list[Optional[str]] = []
    sims: list[Optional[float]] = []
    seen: set[str] = set()
    for entry in getattr(entries, "entries", entries):
        hit = best_match(entry.title, entry.year, index, mode)
        if hit is None or hit[0] in seen:
            ids.append(None)
            sims.append(hit[1] if hit else None)
            continue
        seen.add(hit[0])
        ids.append(hit[0])
        sims.append(hit[1])
    return MatchOutcome(movie_ids=ids, similarities=sims, mode=mode)
