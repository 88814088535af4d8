import difflib
import random

import pytest

from narrec.corpus import CatalogEntry
from narrec.matching import (EXACT, MatchMode, TitleIndex, best_match, gestalt_similarity,
                             match_list, matching_blocks, normalize_title)
from narrec.parsing import TitleYear


def oracle(a, b):
    return difflib.SequenceMatcher(None, a, b, autojunk=False).ratio()


def test_matches_difflib_on_random_pairs():
    rng = random.Random(11)
    for _ in range(500):
        alphabet = rng.choice(["ab", "abc ", "abcdefgh .", "xyz"])
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        assert gestalt_similarity(a, b) == oracle(a, b)
        want = [tuple(m) for m in difflib.SequenceMatcher(None, a, b, autojunk=False).get_matching_blocks()[:-1]]
        assert matching_blocks(a, b) == want


def test_worked_example():
    sim = gestalt_similarity("dr. strangelove", "dr strangelove")
    assert sim == 28 / 29
    assert sim >= 0.9 and sim < 0.97


def test_identity_and_empty():
    assert gestalt_similarity("", "") == 1.0
    assert gestalt_similarity("abc", "") == 0.0
    assert gestalt_similarity("heat", "heat") == 1.0


def test_asymmetric_pair_is_pinned():
    # the decomposition depends on argument order here
    a, b = "abxcd", "cdxab"
    assert gestalt_similarity(a, b) == oracle(a, b)
    assert gestalt_similarity(b, a) == oracle(b, a)


def test_symmetric_when_unique():
    assert gestalt_similarity("a prophet", "a prophett") == gestalt_similarity("a prophett", "a prophet")


def test_normalize_title():
    assert normalize_title("  The   Thing\t") == "the thing"


CATALOG = {
    "m1": CatalogEntry("m1", 1964, ("Dr. Strangelove", "Docteur Folamour")),
    "m2": CatalogEntry("m2", 2009, ("A Prophet", "Un prophète")),
    "m3": CatalogEntry("m3", 1982, ("The Thing",)),
    "m4": CatalogEntry("m4", 2011, ("The Thing",)),
}


def test_exact_requires_year_and_normalized_alias():
    idx = TitleIndex.from_catalog(CATALOG)
    assert best_match("the  THING", 1982, idx) == ("m3", 1.0)
    assert best_match("The Thing", 2011, idx) == ("m4", 1.0)
    assert best_match("The Thing", 1999, idx) is None
    assert best_match("docteur folamour", 1964, idx) == ("m1", 1.0)


def test_soft_threshold():
    idx = TitleIndex.from_catalog(CATALOG)
    assert best_match("Dr Strangelove", 1964, idx, MatchMode("soft", 0.9))[0] == "m1"
    assert best_match("Dr Strangelove", 1964, idx, MatchMode("soft", 0.97)) is None
    hit = best_match("A Prophett", 2009, idx, MatchMode("soft", 0.9))
    assert hit[0] == "m2" and round(hit[1], 3) == 0.947


def test_exact_hits_are_subset_of_soft():
    idx = TitleIndex.from_catalog(CATALOG)
    queries = [("The Thing", 1982), ("Dr Strangelove", 1964), ("Heat", 1995), ("A prophet", 2009)]
    soft = MatchMode("soft", 0.9)
    for t, y in queries:
        if best_match(t, y, idx, EXACT):
            assert best_match(t, y, idx, soft)[0] == best_match(t, y, idx, EXACT)[0]


def test_match_list_duplicates_become_misses():
    out = match_list([TitleYear("The Thing", 1982), TitleYear("the thing", 1982),
                      TitleYear("Nope", 1990)], CATALOG)
    assert out.movie_ids == ["m3", None, None]
    assert out.hits == ["m3"]


def test_full_string_mode_tolerates_year_slip():
    idx = TitleIndex.from_catalog(CATALOG)
    mode = MatchMode("soft", 0.9, full_string=True)
    assert best_match("A Prophet", 2010, idx, mode)[0] == "m2"
    assert mode.label == "soft@0.9+year"


def test_mode_validation():
    with pytest.raises(ValueError):
        MatchMode("fuzzy")
    with pytest.raises(ValueError):
        MatchMode("soft", 0.0)
