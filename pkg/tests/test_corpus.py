import json

import pytest

from narrec.corpus import (CatalogEntry, CommunityRecs, CorpusError, Submission, build_gold,
                           dataset_stats, load_catalog, load_corpus, load_gold, load_submissions,
                           parse_catalog_line, write_catalog, write_gold, write_submissions)


def sub(i, t=1_500_000_000, pos=("p1",), neg=()):
    return Submission(f"s{i}", t + i, f"Title {i}", "body", frozenset(pos), frozenset(neg))


def test_round_trip(tmp_path):
    subs = [sub(2), sub(1, neg=("n1",))]
    cat = {"m1": CatalogEntry("m1", 1999, ("Matrix", "The Matrix"))}
    gold = {"s1": CommunityRecs("s1", ("m1",), 4)}
    write_submissions(tmp_path / "s.jsonl", subs)
    write_catalog(tmp_path / "c.jsonl", cat)
    write_gold(tmp_path / "g.jsonl", gold)
    loaded = load_submissions(tmp_path / "s.jsonl")
    assert [s.id for s in loaded] == ["s1", "s2"]
    assert set(loaded) == set(subs)
    assert load_catalog(tmp_path / "c.jsonl") == cat
    assert load_gold(tmp_path / "g.jsonl") == gold


def test_duplicate_id_names_both_lines(tmp_path):
    lines = [json.dumps(sub(i).to_json()) for i in range(9)]
    lines[8] = json.dumps(sub(2).to_json())
    lines.insert(2, "")
    (tmp_path / "s.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError) as err:
        load_submissions(tmp_path / "s.jsonl")
    assert "lines 4 and 10" in str(err.value)


def test_missing_positive_mentions(tmp_path):
    obj = sub(1).to_json()
    obj["pos_movies"] = []
    (tmp_path / "s.jsonl").write_text(json.dumps(obj) + "\n")
    with pytest.raises(CorpusError, match="pos_movies"):
        load_submissions(tmp_path / "s.jsonl")


def test_date_range(tmp_path):
    write_submissions(tmp_path / "s.jsonl", [sub(1)])
    with pytest.raises(CorpusError, match="date range"):
        load_submissions(tmp_path / "s.jsonl", date_range=(0, 10))


def test_pipe_catalog_line():
    e = parse_catalog_line("tt0062622 | 1968 | 2001: A Space Odyssey; 2001 - Odyssee im Weltraum")
    assert e.movie_id == "tt0062622" and e.release_year == 1968
    assert e.aliases == ("2001: A Space Odyssey", "2001 - Odyssee im Weltraum")


def test_bad_year_rejected():
    with pytest.raises(CorpusError, match="out of range"):
        parse_catalog_line("x | 1700 | Old")
    with pytest.raises(CorpusError):
        parse_catalog_line('{"movie_id": "x", "year": "soon", "aliases": ["A"]}')


def test_gold_excludes_mentions():
    s = sub(1, pos=("a",), neg=("b",))
    g = build_gold(s, ["a", "b", "c", "c", "d"])
    assert g.items == {"c", "d"} and g.raw_count == 5


def test_gold_ids_must_be_in_catalog():
    with pytest.raises(CorpusError, match="not in catalog"):
        build_gold(sub(1), ["zz"], catalog={})


def test_dataset_stats():
    subs = [sub(1, pos=("a",)), sub(2, pos=("a", "b"))]
    st = dataset_stats(subs, {"s1": CommunityRecs("s1", ("x", "y"), 3),
                              "s2": CommunityRecs("s2", ("x",), 2)})
    assert (st.n_submissions, st.n_unique_mentioned, st.n_comments,
            st.n_distinct_suggested, st.n_recommendations) == (2, 2, 5, 2, 3)


def test_load_corpus_exclusions(tmp_path):
    cat = {f"m{i}": CatalogEntry(f"m{i}", 2000, (f"M{i}",)) for i in range(20)}
    subs = [sub(1, pos=("m0",)), sub(2, pos=("m0",)), sub(3, pos=("m0",)), sub(4, pos=("m0",))]
    gold = {"s1": CommunityRecs("s1", tuple(f"m{i}" for i in range(1, 12))),
            "s2": CommunityRecs("s2", ("m0",)),
            "s3": CommunityRecs("s3", ("m1", "m2"))}
    write_submissions(tmp_path / "s.jsonl", subs)
    write_catalog(tmp_path / "c.jsonl", cat)
    write_gold(tmp_path / "g.jsonl", gold)
    corpus = load_corpus(tmp_path / "s.jsonl", tmp_path / "g.jsonl", tmp_path / "c.jsonl")
    assert [s.id for s in corpus.submissions] == ["s1"]
    reasons = {e.submission_id: e.reason for e in corpus.excluded}
    assert reasons == {"s2": "empty gold", "s3": "gold below 10", "s4": "no gold record"}


def test_load_corpus_missing_file(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        load_corpus(tmp_path / "a", tmp_path / "b", tmp_path / "c")


def test_year_is_utc():
    assert Submission("x", 1577836799, "t", "", frozenset({"a"})).year == 2019
