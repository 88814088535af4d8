import json

import pytest

from narrec.parsing import (TitleYear, dedup_and_cap, extract_json, format_indicators,
                            format_report, parse_entry, parse_response, parsed_from_json)


def reply(items):
    return json.dumps({"recommendations": items})


TEN = [f"Movie {i} (199{i})" for i in range(10)]


def test_clean_reply():
    pl = parse_response(reply(TEN), seed=0)
    assert pl.valid_json and pl.had_exactly_ten and not pl.capped
    assert [str(e) for e in pl.entries] == TEN


def test_prose_and_fences_tolerated_unless_strict():
    raw = "Sure! Here you go:\n```json\n" + reply(TEN) + "\n```"
    assert parse_response(raw, 0).valid_json
    assert not parse_response(raw, 0, strict=True).valid_json
    assert parse_response(reply(TEN), 0, strict=True).valid_json


def test_invalid_json():
    for raw in ["", None, "no json here", '{"recommendations": ["A (1990)"']:
        pl = parse_response(raw, 0)
        assert not pl.valid_json and pl.entries == []


def test_entry_pattern():
    assert parse_entry(" Heat (1995) ") == TitleYear("Heat", 1995)
    assert parse_entry("Se7en (1995) (1995)") == TitleYear("Se7en (1995)", 1995)
    assert parse_entry("Heat 1995") is None
    assert parse_entry("Heat (95)") is None
    assert parse_entry("Heat (1200)") is None


def test_nonconforming_dropped():
    pl = parse_response(reply(["Heat (1995)", "Heat", 42, "Alien (1979)"]), 0)
    assert pl.n_dropped == 2 and pl.n_raw == 2 and len(pl.entries) == 2


def test_dedup_case_insensitive_first_wins():
    pl = parse_response(reply(["Heat (1995)", "HEAT  (1995)", "Heat (1986)"]), 0)
    assert [str(e) for e in pl.entries] == ["Heat (1995)", "Heat (1986)"]
    assert pl.n_raw == 3 and pl.n_unique == 2


def test_cap_keeps_ten_in_order_deterministically():
    items = [f"Film {i} (2000)" for i in range(15)]
    a = parse_response(reply(items), seed=5)
    b = parse_response(reply(items), seed=5)
    assert a.capped and len(a.entries) == 10
    assert a.entries == b.entries
    idx = [items.index(str(e)) for e in a.entries]
    assert idx == sorted(idx)
    assert not a.had_exactly_ten


def test_dedup_is_idempotent_on_entries():
    items = [TitleYear(f"F{i % 13}", 2000) for i in range(30)]
    once = dedup_and_cap(items, seed=1)
    twice = dedup_and_cap(once.entries, seed=1)
    assert twice.entries == once.entries


def test_unnamed_list_fallback():
    pl = parse_response(json.dumps({"movies": TEN}), 0)
    assert len(pl.entries) == 10


def test_extract_json_skips_non_objects():
    assert extract_json("[1,2] then {\"a\": 1}") == {"a": 1}


def test_format_indicators_hand_computed():
    good = parse_response(reply(TEN), 0)
    bad = parse_response("oops", 0)
    dup = parse_response(reply(["A (1990)", "a (1990)", "B (2020)"]), 0)
    ind = format_indicators([good, bad, dup], [1995, 1995, 2000])
    assert ind["valid_json_ratio"] == [1.0, 0.0, 1.0]
    assert ind["exactly_ten_ratio"] == [1.0, 0.0]
    assert ind["exactly_ten_all_ratio"] == [1.0, 0.0, 0.0]
    assert ind["unique_fraction"] == [1.0, 2 / 3]
    assert ind["year_compliance_fraction"] == [0.6, 0.5]
    rep = format_report([good, bad, dup], [1995, 1995, 2000], n_resamples=200)
    assert rep.valid_json_ratio.value == pytest.approx(2 / 3)
    assert rep.exactly_ten_ratio.n == 2


def test_parsed_round_trip():
    pl = parse_response(reply(TEN + ["Extra (2001)"]), 3)
    again = parsed_from_json(json.loads(json.dumps(pl.to_json())))
    assert again == pl
