"""Patient temporal knowledge graph.

Events become entities carrying a precise timestamp at encounter level
only. Events inside one encounter are chained by relative
``same_encounter`` edges; consecutive encounters are joined by a
``before`` edge from the last event of one to the first event of the next.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from itertools import groupby

from .corpus import ClinicalEvent, format_timestamp, parse_timestamp
from .errors import ParseError, PreconditionError, ValidationError

PRECISE = "precise"
RELATIVE_BEFORE = "relative_before"
RELATIVE_SAME_ENCOUNTER = "relative_same_encounter"
TEMPORAL_KINDS = (PRECISE, RELATIVE_BEFORE, RELATIVE_SAME_ENCOUNTER)

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


@dataclass(frozen=True)
class Concept:
    concept_id: str
    canonical_name: str
    synonyms: tuple[str, ...] = ()
    category: str = ""


@dataclass(frozen=True)
class ConceptCatalog:
    concepts: tuple[Concept, ...]
    relations: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        ids = [c.concept_id for c in self.concepts]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValidationError(f"duplicate concept ids: {', '.join(dupes)}", stage="catalog")
        known = set(ids)
        dangling = [r for r in self.relations if r[0] not in known or r[1] not in known]
        if dangling:
            shown = ", ".join(f"{s}->{d}" for s, d, _ in dangling)
            raise ValidationError(f"catalog relations reference unknown concepts: {shown}", stage="catalog")
        # name index: normalized surface form -> sorted concept ids
        index: dict[str, list[str]] = {}
        for c in self.concepts:
            for name in (c.canonical_name, *c.synonyms):
                key = normalize(name)
                if key and c.concept_id not in index.setdefault(key, []):
                    index[key].append(c.concept_id)
        object.__setattr__(self, "_index", {k: sorted(v) for k, v in index.items()})
        object.__setattr__(self, "_ids", known)

    def __contains__(self, concept_id):
        return concept_id in self._ids

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptCatalog":
        try:
            concepts = tuple(
                Concept(str(c["id"]), str(c["name"]), tuple(map(str, c.get("synonyms", []))), str(c.get("category", "")))
                for c in data.get("concepts", [])
            )
            relations = tuple((str(r["src"]), str(r["dst"]), str(r.get("rel", ""))) for r in data.get("relations", []))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"malformed catalog entry: {exc}", stage="catalog") from exc
        return cls(concepts, relations)


def load_catalog(path) -> ConceptCatalog:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"catalog is not valid JSON: {exc.msg}", line=exc.lineno, stage="catalog") from exc
    return ConceptCatalog.from_dict(data)


def link_entity(mention: str, catalog: ConceptCatalog) -> str | None:
    """Map a mention to a concept id.

    An exact normalized match on a name or synonym wins; otherwise the
    longest name or synonym found inside the mention. Remaining ties go to
    the smallest concept id.
    """
    key = normalize(mention)
    if not key:
        raise PreconditionError("cannot link an empty mention", stage="link")
    exact = catalog._index.get(key)
    if exact:
        return exact[0]
    best = None
    for name, ids in catalog._index.items():
        if name in key:
            cand = (-len(name), ids[0])
            if best is None or cand < best:
                best = cand
    return None if best is None else best[1]


@dataclass(frozen=True)
class TkgEntity:
    entity_id: str
    concept_id: str | None
    timestamp: datetime
    attributes: dict = field(hash=False)
    source_event_id: str
    description: str
    kind: str
    intra_order: int

    def to_event(self) -> ClinicalEvent:
        return ClinicalEvent(
            event_id=self.source_event_id,
            description=self.description,
            kind=self.kind,
            encounter_time=self.timestamp,
            intra_order=self.intra_order,
            attributes=dict(self.attributes),
        )


@dataclass(frozen=True)
class TkgRelation:
    src: str
    dst: str
    rel_label: str
    temporal_kind: str


@dataclass(frozen=True)
class TemporalKG:
    patient_id: str
    entities: tuple[TkgEntity, ...]
    relations: tuple[TkgRelation, ...]
    timestamps: tuple[datetime, ...]

    @property
    def unlinked_count(self) -> int:
        return sum(1 for e in self.entities if e.concept_id is None)

    def entity(self, entity_id: str) -> TkgEntity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "entities": [
                {
                    "entity_id": e.entity_id,
                    "concept_id": e.concept_id,
                    "timestamp": format_timestamp(e.timestamp),
                    "intra_order": e.intra_order,
                    "kind": e.kind,
                    "description": e.description,
                    "source_event_id": e.source_event_id,
                    "attributes": dict(sorted(e.attributes.items())),
                }
                for e in self.entities
            ],
            "relations": [
                {"src": r.src, "dst": r.dst, "rel": r.rel_label, "temporal_kind": r.temporal_kind}
                for r in self.relations
            ],
            "timestamps": [format_timestamp(t) for t in self.timestamps],
            "unlinked_count": self.unlinked_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TemporalKG":
        try:
            entities = tuple(
                TkgEntity(
                    entity_id=e["entity_id"],
                    concept_id=e.get("concept_id"),
                    timestamp=parse_timestamp(e["timestamp"]),
                    attributes=dict(e.get("attributes", {})),
                    source_event_id=e["source_event_id"],
                    description=e["description"],
                    kind=e["kind"],
                    intra_order=int(e["intra_order"]),
                )
                for e in data["entities"]
            )
            relations = tuple(
                TkgRelation(r["src"], r["dst"], r["rel"], r["temporal_kind"]) for r in data["relations"]
            )
            timestamps = tuple(parse_timestamp(t) for t in data["timestamps"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed TKG dump: {exc}", stage="tkg") from exc
        tkg = cls(data.get("patient_id", ""), entities, relations, timestamps)
        check_tkg(tkg)
        return tkg


def check_tkg(tkg: TemporalKG) -> None:
    """Raise ValidationError if the graph breaks a structural invariant."""
    by_id = {e.entity_id: e for e in tkg.entities}
    if len(by_id) != len(tkg.entities):
        raise ValidationError("duplicate entity ids in TKG", stage="tkg")
    for r in tkg.relations:
        if r.src not in by_id or r.dst not in by_id:
            raise ValidationError(f"relation {r.src}->{r.dst} has a missing endpoint", stage="tkg")
        if r.temporal_kind not in TEMPORAL_KINDS:
            raise ValidationError(f"unknown temporal kind {r.temporal_kind!r}", stage="tkg")
        same = by_id[r.src].timestamp == by_id[r.dst].timestamp
        if r.temporal_kind == RELATIVE_SAME_ENCOUNTER and not same:
            raise ValidationError(f"same-encounter edge {r.src}->{r.dst} crosses encounters", stage="tkg")
        if r.temporal_kind == RELATIVE_BEFORE and same:
            raise ValidationError(f"before edge {r.src}->{r.dst} stays inside one encounter", stage="tkg")
    attached = {e.timestamp for e in tkg.entities}
    if set(tkg.timestamps) - attached:
        raise ValidationError("timestamp without an attached entity", stage="tkg")


def instantiate_tkg(events, catalog: ConceptCatalog, patient_id: str = "") -> TemporalKG:
    events = list(events)
    keys = [e.sort_key for e in events]
    if any(a >= b for a, b in zip(keys, keys[1:])):
        raise PreconditionError("events must be strictly ordered by (encounter_time, intra_order)", stage="tkg")
    entities = tuple(
        TkgEntity(
            entity_id=ev.event_id,
            concept_id=link_entity(ev.description, catalog),
            timestamp=ev.encounter_time,
            attributes=dict(ev.attributes),
            source_event_id=ev.event_id,
            description=ev.description,
            kind=ev.kind,
            intra_order=ev.intra_order,
        )
        for ev in events
    )
    encounters = [list(group) for _, group in groupby(entities, key=lambda e: e.timestamp)]
    relations = []
    for enc in encounters:
        for a, b in zip(enc, enc[1:]):
            relations.append(TkgRelation(a.entity_id, b.entity_id, "same_encounter_next", RELATIVE_SAME_ENCOUNTER))
    for prev, nxt in zip(encounters, encounters[1:]):
        relations.append(TkgRelation(prev[-1].entity_id, nxt[0].entity_id, "before", RELATIVE_BEFORE))
    return TemporalKG(patient_id, entities, tuple(relations), tuple(enc[0].timestamp for enc in encounters))


@dataclass(frozen=True)
class Trajectory:
    patient_id: str
    events: tuple[ClinicalEvent, ...]

    def __len__(self):
        return len(self.events)


def extract_trajectory(tkg: TemporalKG) -> Trajectory:
    if not tkg.entities:
        raise PreconditionError(f"TKG for patient {tkg.patient_id!r} is empty", stage="trajectory")
    ordered = sorted(tkg.entities, key=lambda e: (e.timestamp, e.intra_order))
    return Trajectory(tkg.patient_id, tuple(e.to_event() for e in ordered))


def dump_tkg(tkg: TemporalKG, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tkg.to_dict(), fh, ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")


def read_tkg(path) -> TemporalKG:
    with open(path, encoding="utf-8") as fh:
        return TemporalKG.from_dict(json.load(fh))
