import io
import json
import random
from datetime import timedelta
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajalign.corpus import (
    SEPARATOR,
    ClinicalDocument,
    ClinicalEvent,
    LexiconExtractor,
    PatientRecord,
    RaritySummarizer,
    condense,
    extract_events,
    parse_corpus,
    parse_timestamp,
    partition_history,
    read_events,
    split_sentences,
    summarize_history,
    validate_lexicon,
    write_events,
)
from trajalign.errors import ConfigError, ParseError, PreconditionError, ProviderError
from trajalign.tokens import count_tokens, truncate_tokens

DATA = Path(__file__).parent / "data"


def line(pid, ts, text="note text.", lang="en", **extra):
    return json.dumps({"patient_id": pid, "timestamp": ts, "text": text, "lang": lang, **extra})


def doc(text, day=0, index=0, lang="en", pid="P1"):
    return ClinicalDocument(pid, parse_timestamp(f"2020-01-{day + 1:02d}T00:00:00Z"), text, lang, index)


# -- parsing ------------------------------------------------------------------------


def test_groups_by_patient():
    recs = parse_corpus([line("a", "2020-01-01"), line("b", "2020-01-02"), line("a", "2020-01-03")])
    assert [(r.patient_id, len(r.documents)) for r in recs] == [("a", 2), ("b", 1)]


def test_documents_sorted_ascending():
    (rec,) = parse_corpus([line("a", "2020-01-02"), line("a", "2019-05-01")])
    assert [d.timestamp.year for d in rec.documents] == [2019, 2020]


def test_empty_input_is_empty_set():
    assert parse_corpus([]) == []
    assert parse_corpus(["", "  "]) == []


def test_unknown_keys_ignored_and_lang_defaults():
    raw = json.dumps({"patient_id": "a", "timestamp": "2020-01-01T00:00:00Z", "text": "x.", "extra": 1})
    (rec,) = parse_corpus([raw])
    assert rec.documents[0].lang == "en"


@pytest.mark.parametrize(
    "bad, field",
    [
        ("{not json", None),
        (json.dumps({"patient_id": "a", "timestamp": "yesterday", "text": "x"}), "timestamp"),
        (json.dumps({"patient_id": "a", "timestamp": "2020-01-01", "text": "   "}), "text"),
        (json.dumps({"timestamp": "2020-01-01", "text": "x"}), "patient_id"),
    ],
)
def test_parse_errors_carry_line_number(bad, field):
    with pytest.raises(ParseError) as info:
        parse_corpus([line("a", "2020-01-01"), bad])
    assert info.value.line == 2
    assert info.value.exit_code == 3
    if field:
        assert info.value.field == field


def test_thousand_lines_match_sort_oracle():
    rng = random.Random(7)
    lines, truth = [], []
    for k in range(1000):
        pid = f"p{rng.randint(0, 30):02d}"
        ts = f"2020-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}T{rng.randint(0, 1):02d}:00:00Z"
        lines.append(line(pid, ts, f"note {k}."))
        truth.append((pid, ts, k))
    truth.sort()
    got = [(r.patient_id, d.text) for r in parse_corpus(lines) for d in r.documents]
    assert got == [(pid, f"note {k}.") for pid, _, k in truth]


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(12))), st.lists(st.integers(0, 3), min_size=12, max_size=12))
def test_ordering_invariant_under_permutation(order, days):
    lines = [line("p", f"2020-03-{days[i] + 1:02d}T00:00:00Z", f"n{i}.") for i in order]
    (rec,) = parse_corpus(lines)
    stamps = [d.timestamp for d in rec.documents]
    assert stamps == sorted(stamps)
    # ties keep input order
    for a, b in zip(rec.documents, rec.documents[1:]):
        if a.timestamp == b.timestamp:
            assert a.index < b.index


# -- partition ----------------------------------------------------------------------


def test_partition_singleton():
    d = doc("only.")
    history, recent = partition_history(PatientRecord("P1", (d,)))
    assert history == () and recent is d


def test_partition_picks_latest_and_tie_by_index():
    docs = tuple(doc(f"d{k}.", day=min(k, 3), index=k) for k in range(5))
    history, recent = partition_history(PatientRecord("P1", docs))
    assert recent.index == 4 and [d.index for d in history] == [0, 1, 2, 3]


def test_partition_matches_linear_scan():
    rng = random.Random(3)
    docs = sorted((doc(f"d{k}.", day=rng.randint(0, 9), index=k) for k in range(50)),
                  key=lambda d: (d.timestamp, d.index))
    best = docs[0]
    for d in docs:
        if (d.timestamp, d.index) >= (best.timestamp, best.index):
            best = d
    history, recent = partition_history(PatientRecord("P1", tuple(docs)))
    assert recent is best and len(history) == 49 and best not in history


def test_partition_empty_record():
    with pytest.raises(PreconditionError):
        partition_history(PatientRecord("P1", ()))


# -- tokens -------------------------------------------------------------------------


def test_token_rules():
    assert count_tokens("one two  three\nfour") == 4
    assert count_tokens("乳腺 癌", "zh") == 3
    assert truncate_tokens("a b c d", 2) == "a b"
    assert truncate_tokens("乳腺癌化疗", 3, "zh") == "乳腺癌"
    assert truncate_tokens("a b", 0) == ""


# -- summarizer ---------------------------------------------------------------------

SENTENCES = [
    "Mammogram showed a spiculated mass in the left breast.",
    "The patient reports no pain.",
    "Core biopsy confirmed invasive ductal carcinoma.",
    "The patient reports mild fatigue.",
    "HER2 was positive on immunohistochemistry.",
    "The patient reports no fever.",
    "Neoadjuvant chemotherapy with docetaxel and trastuzumab was started.",
    "Follow up in two weeks.",
    "Restaging MRI showed partial response.",
    "Follow up in four weeks.",
]
TEN_SENTENCE_HISTORY = (
    doc(" ".join(SENTENCES[0:4]), day=0, index=0),
    doc(" ".join(SENTENCES[4:7]), day=1, index=1),
    doc(" ".join(SENTENCES[7:10]), day=2, index=2),
)

# Selections computed with tests/oracles.rarity_select before the summarizer was written.
FROZEN_SELECTIONS = {5: [], 12: [6], 20: [0, 6], 30: [0, 2, 4, 6], 200: list(range(10))}


@pytest.mark.parametrize("budget", sorted(FROZEN_SELECTIONS))
def test_ten_sentence_fixture_matches_oracle(budget):
    got = summarize_history(TEN_SENTENCE_HISTORY, RaritySummarizer(), budget)
    assert got == "\n".join(SENTENCES[i] for i in FROZEN_SELECTIONS[budget])


def test_empty_history_and_no_compression():
    assert summarize_history((), RaritySummarizer(), 10) == ""
    three = (doc("First point. Second point. Third point."),)
    assert summarize_history(three, RaritySummarizer(), 100).split("\n") == [
        "First point.", "Second point.", "Third point."
    ]


def test_summarizer_budget_must_be_positive():
    with pytest.raises(PreconditionError):
        summarize_history(TEN_SENTENCE_HISTORY, RaritySummarizer(), 0)


def test_summarizer_failure_is_tagged():
    class Broken:
        def select(self, history, budget):
            raise RuntimeError("model offline")

    with pytest.raises(ProviderError) as info:
        summarize_history(TEN_SENTENCE_HISTORY, Broken(), 10)
    assert info.value.stage == "summarize"


sentence_text = st.text(st.sampled_from("abc xyz 肿瘤治疗"), min_size=1, max_size=30).filter(str.strip)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(sentence_text, min_size=1, max_size=5), min_size=1, max_size=4), st.integers(1, 40))
def test_summary_is_extractive_and_within_budget(docs_sentences, budget):
    history = tuple(doc(". ".join(s) + ".", day=k, index=k) for k, s in enumerate(docs_sentences))
    out = summarize_history(history, RaritySummarizer(), budget)
    if out:
        sources = [s for d in history for s in split_sentences(d.text)]
        for s in out.split("\n"):
            assert s in sources
        assert sum(count_tokens(s) for s in out.split("\n")) <= budget


# -- condense -----------------------------------------------------------------------


def test_condensed_layout_and_cap():
    rec = PatientRecord("P1", TEN_SENTENCE_HISTORY + (doc("Latest note: chemotherapy cycle 2 given.", day=5, index=3),))
    c = condense(rec, context_tokens=200)
    assert c.combined == c.historical_summary + SEPARATOR + c.recent_note
    assert c.recent_note == "Latest note: chemotherapy cycle 2 given."
    assert c.token_count == count_tokens(c.combined) <= 200
    assert not c.recent_truncated


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 60), st.integers(1, 60))
def test_condensed_never_exceeds_cap(cap, recent_words):
    recent = doc(" ".join(["word"] * recent_words) + ".", day=9, index=9)
    c = condense(PatientRecord("P1", TEN_SENTENCE_HISTORY + (recent,)), context_tokens=cap)
    assert count_tokens(c.combined) <= cap
    assert c.recent_truncated == (c.recent_note != recent.text)


# -- extraction ---------------------------------------------------------------------


def test_direct_lexicon_hit():
    rec = PatientRecord("P1", (doc("Received chemotherapy cycle 2."),))
    ex = extract_events(condense(rec), LexiconExtractor({"treatment": ["chemotherapy"]}))
    assert [(e.kind, e.description) for e in ex.events] == [("treatment", "Received chemotherapy cycle 2.")]
    assert ex.warnings == ()


def test_no_hits_sets_warning():
    rec = PatientRecord("P1", (doc("Nothing of note today."),))
    ex = extract_events(condense(rec), LexiconExtractor({"treatment": ["chemotherapy"]}))
    assert ex.events == () and ex.warnings


def test_hand_labeled_note():
    fixture = json.loads((DATA / "labeled_note.json").read_text())
    (rec,) = parse_corpus([json.dumps(fixture["document"])])
    ex = extract_events(condense(rec), LexiconExtractor())
    got = [{"description": e.description, "kind": e.kind, "keyword": e.attributes["keyword"]} for e in ex.events]
    assert got == fixture["events"]
    assert [e.intra_order for e in ex.events] == list(range(6))
    assert all(e.description in fixture["document"]["text"] for e in ex.events)


def test_keyword_boundaries():
    ext = LexiconExtractor({"imaging": ["ct"], "treatment": ["化疗"]})
    assert ext.classify("The doctor reviewed the chart.") is None  # "ct" inside a word
    assert ext.classify("胸部CT复查") == ("imaging", "ct")
    assert ext.classify("开始化疗") == ("treatment", "化疗")


def test_earliest_then_longest_keyword_wins():
    ext = LexiconExtractor({"staging": ["stage"], "treatment": ["stage iv chemotherapy", "chemotherapy"]})
    assert ext.classify("Chemotherapy for stage IV.") == ("treatment", "chemotherapy")
    assert ext.classify("Stage IV chemotherapy planned.") == ("treatment", "stage iv chemotherapy")


def test_unknown_lexicon_kind_rejected():
    with pytest.raises(ConfigError):
        validate_lexicon({"surgery": ["x"]})


def test_events_ordered_across_history_and_recent():
    rec = PatientRecord("P1", (
        doc("Biopsy confirmed carcinoma. Started chemotherapy.", day=0, index=0),
        doc("CT shows stable disease.", day=3, index=1),
    ))
    ex = extract_events(condense(rec))
    keys = [e.sort_key for e in ex.events]
    assert keys == sorted(keys) and len(ex.events) == 3
    assert ex.events[-1].attributes["source"] == "recent"


def test_event_jsonl_round_trip():
    rec = PatientRecord("P1", (doc("Diagnosed with carcinoma. 开始化疗。", lang="en"),))
    events = extract_events(condense(rec)).events
    buf = io.StringIO()
    write_events(events, buf)
    buf.seek(0)
    assert read_events(buf) == list(events)


def test_event_validation():
    ts = parse_timestamp("2020-01-01T00:00:00Z")
    with pytest.raises(ValueError):
        ClinicalEvent("e", "   ", "other", ts, 0)
    with pytest.raises(ValueError):
        ClinicalEvent("e", "x", "surgery", ts, 0)
    with pytest.raises(ValueError):
        ClinicalEvent("e", "x", "other", ts, -1)


def test_timestamps_normalized_to_utc():
    a = parse_timestamp("2020-01-01T08:00:00+08:00")
    b = parse_timestamp("2020-01-01T00:00:00Z")
    assert a == b and a.tzinfo is not None
    assert parse_timestamp("2020-01-01") + timedelta(hours=1) == parse_timestamp("2020-01-01T01:00:00")
