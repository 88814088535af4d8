"""Turn raw model replies into validated recommendation lists.

Also computes the four format-adherence ratios (valid JSON, exactly ten
entries, uniqueness, release year no later than the request year).
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from narrec.matching import normalize_title
from narrec.stats import bootstrap_ci

LIST_SIZE = 10
MIN_YEAR, MAX_YEAR = 1870, 2100
ENTRY_PATTERN = re.compile(r"^(.+) \((\d{4})\)$", re.DOTALL)


@dataclass(frozen=True)
class TitleYear:
    title: str
    year: int

    def __str__(self) -> str:
        return f"{self.title} ({self.year})"

    @property
    def key(self) -> tuple[str, int]:
        return normalize_title(self.title), self.year


@dataclass
class ParsedList:
    entries: list[TitleYear] = field(default_factory=list)
    valid_json: bool = False
    n_raw: int = 0
    n_unique: int = 0
    n_dropped: int = 0
    had_exactly_ten: bool = False
    capped: bool = False

    def to_json(self) -> dict:
        return {
            "entries": [str(e) for e in self.entries],
            "valid_json": self.valid_json,
            "n_raw": self.n_raw,
            "n_unique": self.n_unique,
            "n_dropped": self.n_dropped,
            "had_exactly_ten": self.had_exactly_ten,
            "capped": self.capped,
        }


def extract_json(raw_text: Optional[str], strict: bool = False) -> Optional[dict]:
    """First well-formed JSON object in ``raw_text``.

    Surrounding prose and markdown fences are tolerated unless ``strict``,
    in which case the whole (trimmed) text must be one object.
    """
    if not raw_text:
        return None
    if strict:
        try:
            doc = json.loads(raw_text.strip())
        except json.JSONDecodeError:
            return None
        return doc if isinstance(doc, dict) else None

    decoder = json.JSONDecoder()
    pos = raw_text.find("{")
    while pos != -1:
        try:
            doc, _ = decoder.raw_decode(raw_text, pos)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict):
            return doc
        pos = raw_text.find("{", pos + 1)
    return None


def _recommendation_array(doc: dict) -> Optional[list]:
    for key, value in doc.items():
        if key.strip().lower() == "recommendations" and isinstance(value, list):
            return value
    # a single unnamed list is still the answer the prompt asked for
    for value in doc.values():
        if isinstance(value, list):
            return value
    return None


def parse_entry(text: str) -> Optional[TitleYear]:
    m = ENTRY_PATTERN.match(text.strip())
    if not m:
        return None
    title, year = m.group(1).strip(), int(m.group(2))
    if not title or not MIN_YEAR <= year <= MAX_YEAR:
        return None
    return TitleYear(title, year)


def parse_entries(doc: Optional[dict]) -> tuple[list[TitleYear], int]:
    """Conforming entries of the recommendation array and the number dropped."""
    if not doc:
        return [], 0
    items = _recommendation_array(doc)
    if items is None:
        return [], 0
    entries, dropped = [], 0
    for item in items:
        entry = parse_entry(item) if isinstance(item, str) else None
        if entry is None:
            dropped += 1
        else:
            entries.append(entry)
    return entries, dropped


def dedup_and_cap(entries: Sequence[TitleYear], seed: int, valid_json: bool = True,
                  n_dropped: int = 0) -> ParsedList:
    """Case-insensitive dedup (first occurrence wins), then a seeded sample of ten if longer.

    Sampled entries keep their original relative order.
    """
    seen: set = set()
    unique = []
    for entry in entries:
        if entry.key not in seen:
            seen.add(entry.key)
            unique.append(entry)
    kept = unique
    capped = len(unique) > LIST_SIZE
    if capped:
        picks = sorted(random.Random(seed).sample(range(len(unique)), LIST_SIZE))
        kept = [unique[i] for i in picks]
    return ParsedList(entries=kept, valid_json=valid_json, n_raw=len(entries), n_unique=len(unique),
                      n_dropped=n_dropped, had_exactly_ten=len(entries) == LIST_SIZE, capped=capped)


def parse_response(raw_text: Optional[str], seed: int, strict: bool = False) -> ParsedList:
    doc = extract_json(raw_text, strict=strict)
    if doc is None:
        return ParsedList(valid_json=False)
    entries, dropped = parse_entries(doc)
    return dedup_and_cap(entries, seed, valid_json=True, n_dropped=dropped)


# ---------------------------------------------------------------------------

@dataclass
class Ratio:
    value: float
    ci_low: float
    ci_high: float
    n: int

    @classmethod
    def from_values(cls, values: Sequence[float], n_resamples: int, seed: int) -> "Ratio":
        if not values:
            return cls(float("nan"), float("nan"), float("nan"), 0)
        low, high = bootstrap_ci(values, n_resamples=n_resamples, seed=seed)
        return cls(sum(values) / len(values), low, high, len(values))


@dataclass
class FormatReport:
    """Format-adherence ratios with their denominators.

    * valid_json_ratio: over all responses (failed requests included)
    * exactly_ten_ratio: over valid-JSON responses
    * exactly_ten_all_ratio: over all responses
    * unique_fraction: mean unique/n_raw over responses with n_raw > 0
    * year_compliance_fraction: mean share of kept entries with year <= cutoff,
      over responses with at least one kept entry
    """
    valid_json_ratio: Ratio
    exactly_ten_ratio: Ratio
    exactly_ten_all_ratio: Ratio
    unique_fraction: Ratio
    year_compliance_fraction: Ratio

    FIELDS = ("valid_json_ratio", "exactly_ten_ratio", "exactly_ten_all_ratio",
              "unique_fraction", "year_compliance_fraction")

    def as_dict(self) -> dict[str, Ratio]:
        return {name: getattr(self, name) for name in self.FIELDS}


def format_indicators(parsed: Sequence[ParsedList], cutoff_years: Sequence[int]) -> dict[str, list[float]]:
    """Per-response values whose means are the format-adherence ratios."""
    if len(parsed) != len(cutoff_years):
        raise ValueError("need one cutoff year per parsed response")
    out: dict[str, list[float]] = {name: [] for name in FormatReport.FIELDS}
    for pl, cutoff in zip(parsed, cutoff_years):
        out["valid_json_ratio"].append(float(pl.valid_json))
        out["exactly_ten_all_ratio"].append(float(pl.valid_json and pl.had_exactly_ten))
        if pl.valid_json:
            out["exactly_ten_ratio"].append(float(pl.had_exactly_ten))
        if pl.n_raw > 0:
            out["unique_fraction"].append(pl.n_unique / pl.n_raw)
        if pl.entries:
            ok = sum(1 for e in pl.entries if e.year <= cutoff)
            out["year_compliance_fraction"].append(ok / len(pl.entries))
    return out


def format_report(parsed: Sequence[ParsedList], cutoff_years: Sequence[int],
                  n_resamples: int = 10_000, seed: int = 0) -> FormatReport:
    if not parsed:
        raise ValueError("format_report needs at least one response")
    values = format_indicators(parsed, cutoff_years)
    return FormatReport(**{name: Ratio.from_values(v, n_resamples, seed) for name, v in values.items()})


def parsed_from_json(obj: dict[str, Any]) -> ParsedList:
    entries = [parse_entry(s) for s in obj.get("entries", [])]
    return ParsedList(entries=[e for e in entries if e is not None],
                      **{k: obj[k] for k in ("valid_json", "n_raw", "n_unique", "n_dropped",
                                             "had_exactly_ten", "capped")})
