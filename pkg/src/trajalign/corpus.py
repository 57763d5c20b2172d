"""Ingestion of timestamped clinical notes and event extraction.

Raw notes arrive as JSON Lines, get grouped per patient and ordered in
time, then condensed into an extractive history summary plus the latest
note. Discrete clinical events are pulled out of the condensed text with a
keyword lexicon (or any object implementing ``extract``).
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Protocol, Sequence

from .errors import ConfigError, ParseError, PreconditionError, ProviderError
from .tokens import CJK_LANGS, count_tokens, truncate_tokens

log = logging.getLogger(__name__)

EVENT_KINDS = ("diagnosis", "staging", "treatment", "biomarker", "imaging", "other")

SEPARATOR = "\n<<<RECENT>>>\n"
DEFAULT_CONTEXT_TOKENS = 20_000
DEFAULT_HISTORY_SHARE = 0.8

DEFAULT_LEXICON = {
    "diagnosis": ["diagnosed", "diagnosis", "carcinoma", "adenocarcinoma", "biopsy confirmed", "确诊", "诊断"],
    "staging": ["stage", "tnm", "metastasis", "metastatic", "分期", "转移"],
    "treatment": [
        "chemotherapy", "radiotherapy", "surgery", "resection", "lobectomy", "mastectomy",
        "immunotherapy", "targeted therapy", "endocrine therapy", "osimertinib", "trastuzumab",
        "pembrolizumab", "化疗", "放疗", "手术", "靶向治疗", "免疫治疗",
    ],
    "biomarker": ["egfr", "her2", "alk", "pd-l1", "ki-67", "cea", "brca", "基因突变"],
    "imaging": ["ct", "mri", "pet", "ultrasound", "x-ray", "mammogram", "影像", "复查"],
}


def parse_timestamp(value) -> datetime:
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"not an ISO-8601 string: {value!r}")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ClinicalDocument:
    patient_id: str
    timestamp: datetime
    text: str
    lang: str = "en"
    index: int = 0  # position in the input stream, used for stable tie-breaks


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    documents: tuple[ClinicalDocument, ...]


@dataclass(frozen=True)
class SummarySentence:
    text: str
    timestamp: datetime
    lang: str
    doc_index: int


@dataclass(frozen=True)
class Segment:
    """A span of condensed text that remembers which encounter it came from."""

    text: str
    timestamp: datetime
    lang: str
    source: str  # "history" or "recent"


@dataclass(frozen=True)
class CondensedHistory:
    patient_id: str
    historical_summary: str
    recent_note: str
    combined: str
    segments: tuple[Segment, ...]
    token_count: int
    recent_truncated: bool = False


@dataclass(frozen=True)
class ClinicalEvent:
    event_id: str
    description: str
    kind: str
    encounter_time: datetime
    intra_order: int
    attributes: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"event {self.event_id} has an empty description")
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.intra_order < 0:
            raise ValueError("intra_order must be nonnegative")

    @property
    def sort_key(self):
        return (self.encounter_time, self.intra_order)

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "description": self.description,
            "kind": self.kind,
            "encounter_time": format_timestamp(self.encounter_time),
            "intra_order": self.intra_order,
            "attributes": dict(sorted(self.attributes.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalEvent":
        return cls(
            event_id=d["event_id"],
            description=d["description"],
            kind=d["kind"],
            encounter_time=parse_timestamp(d["encounter_time"]),
            intra_order=int(d["intra_order"]),
            attributes={str(k): str(v) for k, v in d.get("attributes", {}).items()},
        )


# -- parsing -----------------------------------------------------------------


def _field(obj: dict, name: str, lineno: int) -> str:
    value = obj.get(name)
    if not isinstance(value, str):
        raise ParseError(f"field {name!r} missing or not a string", line=lineno, field=name)
    return value


def parse_document(line: str, lineno: int, index: int) -> ClinicalDocument:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from exc
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", line=lineno)
    patient_id = _field(obj, "patient_id", lineno)
    raw_ts = _field(obj, "timestamp", lineno)
    text = _field(obj, "text", lineno)
    lang = obj.get("lang", "en")
    if not isinstance(lang, str) or not lang:
        raise ParseError("field 'lang' must be a non-empty string", line=lineno, field="lang")
    try:
        ts = parse_timestamp(raw_ts)
    except ValueError as exc:
        raise ParseError(f"unparseable timestamp {raw_ts!r}", line=lineno, field="timestamp") from exc
    if not text.strip():
        raise ParseError("text is empty", line=lineno, field="text")
    return ClinicalDocument(patient_id, ts, text, lang, index)


def parse_corpus(lines: Iterable[str]) -> list[PatientRecord]:
    """Group JSON Lines document records into per-patient, time-ordered records.

    Blank lines are skipped. Documents sharing a timestamp keep their input
    order. Records come back sorted by patient_id.
    """
    by_patient: dict[str, list[ClinicalDocument]] = defaultdict(list)
    index = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        doc = parse_document(line, lineno, index)
        by_patient[doc.patient_id].append(doc)
        index += 1
    return [
        PatientRecord(pid, tuple(sorted(docs, key=lambda d: (d.timestamp, d.index))))
        for pid, docs in sorted(by_patient.items())
    ]


def read_corpus(path) -> list[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def partition_history(record: PatientRecord) -> tuple[tuple[ClinicalDocument, ...], ClinicalDocument]:
    if not record.documents:
        raise PreconditionError(f"patient {record.patient_id} has no documents", stage="partition")
    recent = max(record.documents, key=lambda d: (d.timestamp, d.index))
    history = tuple(d for d in record.documents if d is not recent)
    return history, recent


# -- summarization -------------------------------------------------------------

_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+|(?<=[。！？；])|\n+")
_WORD = re.compile(r"\w+")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_BREAK.split(text) if s and s.strip()]


def sentence_terms(sentence: str, lang: str) -> set[str]:
    folded = sentence.casefold()
    if lang in CJK_LANGS:
        return {ch for ch in folded if ch.isalnum()}
    return set(_WORD.findall(folded))


class SummarizerProvider(Protocol):
    def select(self, history: Sequence[ClinicalDocument], budget: int) -> list[SummarySentence]: ...


class RaritySummarizer:
    """Extractive summarizer ranking sentences by summed inverse document frequency.

    Every sentence of the history is a "document" for the frequency count;
    a sentence scores the sum of ln(N / df) over its distinct terms. The
    highest scoring sentences are kept while they fit the token budget and
    are returned in their original order.
    """

    def select(self, history, budget):
        sentences = [
            SummarySentence(s, doc.timestamp, doc.lang, doc.index)
            for doc in history
            for s in split_sentences(doc.text)
        ]
        if not sentences:
            return []
        terms = [sentence_terms(s.text, s.lang) for s in sentences]
        df = Counter(t for ts in terms for t in ts)
        n = len(sentences)
        scores = [sum(math.log(n / df[t]) for t in sorted(ts)) for ts in terms]
        ranked = sorted(range(n), key=lambda i: (-scores[i], i))
        keep, used = [], 0
        for i in ranked:
            cost = count_tokens(sentences[i].text, sentences[i].lang)
            if used + cost > budget:
                break
            keep.append(i)
            used += cost
        return [sentences[i] for i in sorted(keep)]


def summarize_history(history: Sequence[ClinicalDocument], summarizer: SummarizerProvider, budget: int) -> str:
    return "\n".join(s.text for s in _select(history, summarizer, budget))


def _select(history, summarizer, budget) -> list[SummarySentence]:
    if budget <= 0:
        raise PreconditionError("summary budget must be positive", stage="summarize")
    if not history:
        return []
    try:
        return list(summarizer.select(history, budget))
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"summarizer failed: {exc}", stage="summarize") from exc


def condense(
    record: PatientRecord,
    summarizer: SummarizerProvider | None = None,
    context_tokens: int = DEFAULT_CONTEXT_TOKENS,
    history_share: float = DEFAULT_HISTORY_SHARE,
) -> CondensedHistory:
    """Build the summary + separator + latest note text under a token cap."""
    if context_tokens <= 0 or not 0 < history_share < 1:
        raise PreconditionError("context cap must be positive and history share in (0, 1)", stage="condense")
    summarizer = summarizer or RaritySummarizer()
    history, recent = partition_history(record)
    picked = _select(history, summarizer, max(1, int(context_tokens * history_share)))
    summary_tokens = sum(count_tokens(s.text, s.lang) for s in picked)
    sep_tokens = count_tokens(SEPARATOR, recent.lang)
    recent_budget = context_tokens - summary_tokens - sep_tokens
    recent_text = truncate_tokens(recent.text, recent_budget, recent.lang)
    truncated = recent_text != recent.text
    if truncated:
        log.warning("patient %s: latest note truncated to %d tokens", record.patient_id, recent_budget)
    summary = "\n".join(s.text for s in picked)
    segments = [Segment(s.text, s.timestamp, s.lang, "history") for s in picked]
    if recent_text.strip():
        segments.append(Segment(recent_text, recent.timestamp, recent.lang, "recent"))
    return CondensedHistory(
        patient_id=record.patient_id,
        historical_summary=summary,
        recent_note=recent_text,
        combined=summary + SEPARATOR + recent_text,
        segments=tuple(segments),
        token_count=summary_tokens + sep_tokens + count_tokens(recent_text, recent.lang),
        recent_truncated=truncated,
    )


# -- event extraction ------------------------------------------------------------


class EventExtractorProvider(Protocol):
    def extract(self, condensed: CondensedHistory) -> list[ClinicalEvent]: ...


def load_lexicon(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return validate_lexicon(data)


def validate_lexicon(data) -> dict[str, list[str]]:
    if not isinstance(data, dict):
        raise ConfigError("lexicon must be a JSON object mapping kind to keywords")
    out = {}
    for kind, words in data.items():
        if kind not in EVENT_KINDS:
            raise ConfigError(f"lexicon kind {kind!r} is not one of {', '.join(EVENT_KINDS)}")
        if not isinstance(words, list) or not all(isinstance(w, str) and w.strip() for w in words):
            raise ConfigError(f"lexicon kind {kind!r} needs a list of non-empty strings")
        out[kind] = list(words)
    return out


class LexiconExtractor:
    """One event per sentence that contains a lexicon keyword.

    The event kind comes from the keyword occurring earliest in the
    sentence; a longer keyword wins at the same position, then lexicon kind
    order. ASCII keywords must not touch other ASCII letters or digits;
    CJK keywords match as plain substrings.
    """

    def __init__(self, lexicon: dict[str, list[str]] | None = None):
        lexicon = validate_lexicon(DEFAULT_LEXICON if lexicon is None else lexicon)
        self._patterns = []
        for rank, kind in enumerate(k for k in EVENT_KINDS if k in lexicon):
            for word in lexicon[kind]:
                folded = word.casefold()
                if folded.isascii():
                    pat = re.compile(r"(?<![a-z0-9])" + re.escape(folded) + r"(?![a-z0-9])")
                else:
                    pat = re.compile(re.escape(folded))
                self._patterns.append((kind, rank, word, pat))

    def classify(self, sentence: str):
        folded = sentence.casefold()
        best = None
        for kind, rank, word, pat in self._patterns:
            m = pat.search(folded)
            if m is None:
                continue
            key = (m.start(), -len(word), rank)
            if best is None or key < best[0]:
                best = (key, kind, word)
        return None if best is None else (best[1], best[2])

    def extract(self, condensed: CondensedHistory) -> list[ClinicalEvent]:
        found = []
        intra: dict[datetime, int] = defaultdict(int)
        for seg in condensed.segments:
            for sentence in split_sentences(seg.text):
                hit = self.classify(sentence)
                if hit is None:
                    continue
                kind, word = hit
                order = intra[seg.timestamp]
                intra[seg.timestamp] += 1
                found.append((seg.timestamp, order, sentence, kind, word, seg))
        found.sort(key=lambda f: (f[0], f[1]))
        return [
            ClinicalEvent(
                event_id=f"{condensed.patient_id}:e{n:03d}",
                description=sentence,
                kind=kind,
                encounter_time=ts,
                intra_order=order,
                attributes={"keyword": word, "lang": seg.lang, "source": seg.source},
            )
            for n, (ts, order, sentence, kind, word, seg) in enumerate(found)
        ]


@dataclass(frozen=True)
class Extraction:
    events: tuple[ClinicalEvent, ...]
    warnings: tuple[str, ...] = ()


def extract_events(condensed: CondensedHistory, extractor: EventExtractorProvider | None = None) -> Extraction:
    if not condensed.combined.strip():
        raise PreconditionError("condensed history is empty", stage="extract")
    extractor = extractor or LexiconExtractor()
    try:
        events = list(extractor.extract(condensed))
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"event extractor failed: {exc}", stage="extract") from exc
    events.sort(key=lambda e: e.sort_key)
    ids = [e.event_id for e in events]
    if len(set(ids)) != len(ids):
        raise ProviderError("event extractor produced duplicate event ids", stage="extract")
    warnings = ()
    if not events:
        warnings = (f"patient {condensed.patient_id}: no clinical events extracted",)
        log.warning(warnings[0])
    return Extraction(tuple(events), warnings)


def write_events(events: Iterable[ClinicalEvent], fh) -> None:
    for ev in events:
        fh.write(json.dumps(ev.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_events(fh) -> list[ClinicalEvent]:
    return [ClinicalEvent.from_dict(json.loads(line)) for line in fh if line.strip()]
