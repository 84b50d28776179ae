import json

import pytest
from hypothesis import given, strategies as st

from sdoh_extract.corpus import (
    ClinicalNote,
    CorpusError,
    GoldAnnotation,
    corpus_stats,
    gold_from_dict,
    load_corpus,
    load_gold,
    scrub_phi,
    serialize_gold,
)
from sdoh_extract.schema import CELL_ORDER, Category, Subtype


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_load_two_records(tmp_path):
    path = write_jsonl(tmp_path / "n.jsonl", [{"note_id": "a", "text": "x"}, {"note_id": "b", "text": "y"}])
    notes = load_corpus(path)
    assert [n.note_id for n in notes] == ["a", "b"]


def test_duplicate_note_id_rejected(tmp_path):
    path = write_jsonl(tmp_path / "n.jsonl", [{"note_id": "n1", "text": "x"}, {"note_id": "n1", "text": "y"}])
    with pytest.raises(CorpusError, match="n1") as err:
        load_corpus(path)
    assert err.value.line == 2


def test_empty_file(tmp_path):
    path = tmp_path / "n.jsonl"
    path.write_text("")
    assert load_corpus(path) == []


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "absent.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "n.jsonl"
    path.write_text('{"note_id": "a", "text": "x"}\n{not json\n')
    with pytest.raises(CorpusError, match=r":2:"):
        load_corpus(path)


def test_blank_text_rejected(tmp_path):
    path = write_jsonl(tmp_path / "n.jsonl", [{"note_id": "a", "text": "   "}])
    with pytest.raises(CorpusError, match="empty text"):
        load_corpus(path)


def test_gold_tobacco_accepted():
    g = gold_from_dict({"note_id": "n", "category": "social_history", "subtype": "tobacco_use",
                        "span_text": "never smoker"})
    assert g.subtype is Subtype.TOBACCO_USE


def test_gold_vital_accepted():
    g = gold_from_dict({"note_id": "n", "category": "FamilyHistory", "subtype": "Vital", "span_text": "died"})
    assert (g.category, g.subtype) == (Category.FAMILY_HISTORY, Subtype.VITAL)


@pytest.mark.parametrize(
    "record, message",
    [
        ({"category": "age", "subtype": "tobacco_use"}, "takes no subtype"),
        ({"category": "social_history"}, "requires a subtype"),
        ({"category": "social_history", "subtype": "vital"}, "does not belong"),
        ({"category": "income"}, "unknown category"),
    ],
)
def test_gold_pairing_errors(tmp_path, record, message):
    path = write_jsonl(tmp_path / "g.jsonl", [{"note_id": "n", "span_text": "x", **record}])
    with pytest.raises(CorpusError, match=message):
        load_gold(path)


def test_category_names_case_insensitive():
    assert Category.parse("Social_History") is Category.SOCIAL_HISTORY
    assert Category.parse("AGE") is Category.AGE


gold_strategy = st.builds(
    lambda note, cell, text: GoldAnnotation(note, cell[0], cell[1], text),
    st.sampled_from(["n1", "n2", "n3"]),
    st.sampled_from(CELL_ORDER),
    st.text(min_size=1).filter(str.strip),
)


@given(st.lists(gold_strategy, max_size=20))
def test_gold_round_trip(tmp_path_factory, gold):
    path = tmp_path_factory.mktemp("gold") / "g.jsonl"
    path.write_text(serialize_gold(gold), encoding="utf-8")
    assert load_gold(path) == gold


# scrub_phi: expected outputs worked out by hand from the patterns


def test_scrub_phone():
    text, findings = scrub_phi("call 317-555-0101 today")
    assert text == "call [PHONE] today"
    assert [(f.kind, f.offset) for f in findings] == [("PHONE", 5)]


def test_scrub_mrn():
    text, findings = scrub_phi("MRN 00012345")
    assert text == "MRN [MRN]"
    assert [(f.kind, f.offset, f.length) for f in findings] == [("MRN", 4, 8)]


def test_scrub_no_match_is_identity():
    text = "76 year old white woman, quit 1.5 ppd in 2010"
    assert scrub_phi(text) == (text, [])


def test_scrub_dates_and_offsets():
    raw = "DOB 03/14/1961, seen (317) 555-0101 on March 3, 2020"
    text, findings = scrub_phi(raw)
    assert text == "DOB [DATE], seen [PHONE] on [DATE]"
    assert [(f.kind, f.offset) for f in findings] == [("DATE", 4), ("PHONE", 21), ("DATE", 39)]
    for f in findings:
        assert raw[f.offset:f.offset + f.length].strip()


@given(st.text(alphabet="0123456789-/() .:MRNabc", max_size=60))
def test_scrub_idempotent(text):
    once, _ = scrub_phi(text)
    assert scrub_phi(once) == (once, [])


@given(st.text(alphabet="0123456789-/() .:MRNxyz", max_size=60))
def test_scrub_preserves_unmatched_text(text):
    scrubbed, findings = scrub_phi(text)
    # rebuild from the findings and compare
    pieces, cursor = [], 0
    for f in findings:
        pieces.append(text[cursor:f.offset])
        pieces.append(f"[{f.kind}]")
        cursor = f.offset + f.length
    pieces.append(text[cursor:])
    assert "".join(pieces) == scrubbed


def test_stats_empty():
    stats = corpus_stats([])
    assert all(stats[cell] == 0 for cell in CELL_ORDER)


def test_stats_direct_count():
    gold = [GoldAnnotation("n", Category.SOCIAL_HISTORY, Subtype.TOBACCO_USE, "smoker")] * 3
    gold.append(GoldAnnotation("n", Category.AGE, None, "76 year old"))
    stats = corpus_stats(gold)
    assert stats[(Category.SOCIAL_HISTORY, Subtype.TOBACCO_USE)] == 3
    assert stats[(Category.AGE, None)] == 1
    assert sum(stats.counts.values()) == 4


def test_stats_table_fixture(table_gold):
    # annotation cells shown in the two annotation-example tables
    stats = corpus_stats(table_gold)
    S, F = Category.SOCIAL_HISTORY, Category.FAMILY_HISTORY
    expected = {
        (Category.AGE, None): 2,
        (Category.GENDER, None): 2,
        (Category.ETHNICITY, None): 2,
        (F, Subtype.OBSERVATION): 1,
        (F, Subtype.VITAL): 1,
        (S, Subtype.EMPLOYMENT_STATUS): 3,
        (S, Subtype.ALCOHOL_USE): 1,
        (S, Subtype.TOBACCO_USE): 2,
        (S, Subtype.DRUG_USE): 2,
        (S, Subtype.EDUCATION_STATUS): 1,
        (S, Subtype.LIVING_STATUS): 2,
    }
    assert stats.counts == expected


@given(st.lists(gold_strategy, max_size=30))
def test_stats_category_totals(gold):
    stats = corpus_stats(gold)
    for category in Category:
        assert stats.category_total(category) == sum(g.category is category for g in gold)


def test_note_is_immutable():
    note = ClinicalNote("a", "text")
    with pytest.raises(AttributeError):
        note.text = "other"
