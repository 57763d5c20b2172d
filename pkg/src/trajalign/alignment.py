"""Trajectory-to-guideline alignment.

The pipeline for one patient:

1. ``score_path`` / ``rank_paths``: every guideline step takes its most
   similar trajectory event; a path scores the sum of those maxima, and
   candidate paths are ranked by that score.
2. ``rerank``: a reasoner provider may reorder the top candidates.
3. ``seed_pairs``: confident step matches of the winning path become the
   seed alignment.
4. ``expand_alignment``: bootstrapping rounds add pairs for unaligned
   events, scoring each candidate by a blend of direct similarity and
   consistency with the pairs already aligned.
5. ``merge_graphs`` / ``render_context``: guideline graph, patient graph
   and evidence edges are fused and rendered as LLM context.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx

from .corpus import format_timestamp
from .embedding import SIMILARITY_THRESHOLD, Embedder, cosine_sim, post_json
from .errors import ConfigError, PreconditionError, ProtocolError, TemplateError, ValidationError
from .guideline import GuidelineKG, GuidelinePath
from .tkg import TemporalKG, Trajectory
from .tokens import count_tokens

log = logging.getLogger(__name__)


class SimilarityTable:
    """Memoized cosine similarity between description strings."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder
        self._memo: dict[tuple[str, str], float] = {}

    def __call__(self, a: str, b: str) -> float:
        key = (a, b)
        sim = self._memo.get(key)
        if sim is None:
            u, v = self.embedder.embed([a, b])
            sim = cosine_sim(u, v)
            self._memo[key] = sim
        return sim


def _table(embedder) -> SimilarityTable:
    return embedder if isinstance(embedder, SimilarityTable) else SimilarityTable(embedder)


# -- path scoring ----------------------------------------------------------------

# Similarities and scores are compared after rounding to this many decimals,
# both against each other and against thresholds. Mathematically equal
# values from different vector pairs can differ in the last ulp, and the
# earliest-index tie rules must not depend on that.
SCORE_TIE_DECIMALS = 9


def _q(x: float) -> float:
    return round(x, SCORE_TIE_DECIMALS)


@dataclass(frozen=True)
class StepMatch:
    step_index: int
    step_id: str
    best_event_id: str
    best_sim: float


@dataclass(frozen=True)
class ScoredPath:
    path: GuidelinePath
    score: float
    per_step_best: tuple[StepMatch, ...]


def score_path(traj: Trajectory, path: GuidelinePath, g: GuidelineKG, embedder) -> ScoredPath:
    """Sum over steps of the best cosine similarity to any trajectory event.

    The earliest event wins ties; one event may be the best match for
    several steps.
    """
    if not traj.events:
        raise PreconditionError("trajectory is empty", stage="score")
    if not path.steps:
        raise PreconditionError(f"path {path.path_id} is empty", stage="score")
    sims = _table(embedder)
    matches = []
    for j, step_id in enumerate(path.steps):
        step_desc = g.desc(step_id)
        best_event, best_sim = None, None
        for ev in traj.events:
            s = sims(step_desc, ev.description)
            if best_sim is None or _q(s) > _q(best_sim):
                best_event, best_sim = ev.event_id, s
        matches.append(StepMatch(j, step_id, best_event, best_sim))
    # fsum is order independent, so paths visiting the same steps tie exactly
    return ScoredPath(path, math.fsum(m.best_sim for m in matches), tuple(matches))


def rank_paths(
    traj: Trajectory, paths: Sequence[GuidelinePath], g: GuidelineKG, embedder, top_n: int, parallelism: int = 1
) -> list[ScoredPath]:
    if not paths:
        raise PreconditionError("no candidate paths to rank", stage="rank")
    if top_n < 1:
        raise PreconditionError("top_n must be >= 1", stage="rank")
    sims = _table(embedder)
    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            scored = list(pool.map(lambda p: score_path(traj, p, g, sims), paths))
    else:
        scored = [score_path(traj, p, g, sims) for p in paths]
    scored.sort(key=lambda sp: (-_q(sp.score), sp.path.index))
    return scored[:top_n]


# -- reranking -------------------------------------------------------------------

RERANK_TEMPLATE = string.Template(
    "You are a clinical reasoner. Given the patient's time-ordered clinical events and a list of "
    "candidate guideline paths with their similarity scores, order the candidates from most to least "
    "clinically plausible. Reply with JSON {\"order\": [candidate indices]}.\n\n"
    "Patient trajectory:\n$trajectory\n\nCandidates:\n$candidates\n"
)


class RerankerProvider(Protocol):
    def rerank(self, trajectory: list[str], candidates: list[dict], prompt: str) -> list[int]: ...


class StubReranker:
    def rerank(self, trajectory, candidates, prompt):
        return list(range(len(candidates)))


class RemoteReranker:
    """Client for ``POST {endpoint}/rerank`` returning ``{"order": [...]}``."""

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 60.0, max_retries: int = 2,
                 transport: httpx.BaseTransport | None = None):
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(base_url=endpoint.rstrip("/"), headers=headers, timeout=timeout, transport=transport)
        self.max_retries = max_retries

    def rerank(self, trajectory, candidates, prompt):
        body = {"trajectory": trajectory, "candidates": candidates, "prompt": prompt}
        reply = post_json(self.client, "/rerank", body, self.max_retries, stage="rerank")
        order = reply.get("order")
        if not isinstance(order, list):
            raise ProtocolError("rerank reply lacks an 'order' list", stage="rerank")
        return order


def make_reranker(stub: bool, endpoint: str | None = None, transport=None):
    if stub:
        return StubReranker()
    endpoint = endpoint or os.environ.get("RERANK_ENDPOINT")
    if not endpoint:
        raise ConfigError("remote reranker needs RERANK_ENDPOINT (or enable the stub reranker)")
    return RemoteReranker(endpoint, token=os.environ.get("RERANK_TOKEN"), transport=transport)


def rerank_request(traj: Trajectory, scored: Sequence[ScoredPath], g: GuidelineKG) -> tuple[list[str], list[dict], str]:
    trajectory = [ev.description for ev in traj.events]
    candidates = [
        {"index": i, "steps": [g.desc(s) for s in sp.path.steps], "score": round(sp.score, 6)}
        for i, sp in enumerate(scored)
    ]
    prompt = RERANK_TEMPLATE.substitute(
        trajectory="\n".join(f"{k + 1}. {d}" for k, d in enumerate(trajectory)),
        candidates="\n".join(
            f"[{c['index']}] score={c['score']:.4f}: " + " -> ".join(c["steps"]) for c in candidates
        ),
    )
    return trajectory, candidates, prompt


def rerank(
    traj: Trajectory,
    scored: Sequence[ScoredPath],
    reasoner: RerankerProvider,
    g: GuidelineKG,
    warnings: list[str] | None = None,
) -> list[ScoredPath]:
    """Reorder candidates by the reasoner's reply; keep input order if the reply is unusable."""
    scored = list(scored)
    if not scored:
        raise PreconditionError("nothing to rerank", stage="rerank")
    trajectory, candidates, prompt = rerank_request(traj, scored, g)
    try:
        order = list(reasoner.rerank(trajectory, candidates, prompt))
        if not all(type(i) is int for i in order) or sorted(order) != list(range(len(scored))):
            raise ProtocolError(f"reranker returned {order!r}, not a permutation of 0..{len(scored) - 1}",
                                stage="rerank")
    except Exception as exc:  # any provider failure degrades to score order
        msg = f"rerank fallback to score order: {exc}"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return scored
    return [scored[i] for i in order]


# -- alignment sets --------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentPair:
    event_id: str
    step_id: str
    confidence: float
    event_desc: str = field(default="", compare=False)
    step_desc: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        return {"event_id": self.event_id, "step_id": self.step_id, "confidence": round(self.confidence, 12)}


class AlignmentSet:
    """Ordered, immutable set of pairs; an event aligns to at most one step."""

    def __init__(self, pairs=()):
        pairs = tuple(pairs)
        events = [p.event_id for p in pairs]
        if len(set(events)) != len(events):
            raise ValidationError("an event appears in more than one alignment pair", stage="align")
        self.pairs = pairs
        self.aligned_events = frozenset(events)
        self.aligned_steps = frozenset(p.step_id for p in pairs)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __eq__(self, other):
        if not isinstance(other, AlignmentSet):
            return NotImplemented
        return set(self.keys()) == set(other.keys())

    def __repr__(self):
        return f"AlignmentSet({[(p.event_id, p.step_id) for p in self.pairs]})"

    def keys(self):
        return [(p.event_id, p.step_id) for p in self.pairs]

    def union(self, new_pairs) -> "AlignmentSet":
        return AlignmentSet(self.pairs + tuple(new_pairs))

    def to_list(self) -> list[dict]:
        return [p.to_dict() for p in self.pairs]


@dataclass(frozen=True)
class BootstrapConfig:
    alpha: float = 0.5
    theta: float = SIMILARITY_THRESHOLD
    max_iterations: int = 10
    top_n: int = 5
    whole_graph: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.theta != self.theta:
            raise ConfigError("theta must be a number")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")


def seed_pairs(traj: Trajectory, best: ScoredPath, theta: float, g: GuidelineKG | None = None) -> AlignmentSet:
    """Steps whose best match reaches ``theta`` seed a pair with that event.

    When one event is the best match of several steps it keeps only its
    highest-similarity step (earliest step on ties).
    """
    descs = {ev.event_id: ev.description for ev in traj.events}
    chosen: dict[str, StepMatch] = {}
    for m in best.per_step_best:
        if _q(m.best_sim) < theta:
            continue
        held = chosen.get(m.best_event_id)
        if held is None or _q(m.best_sim) > _q(held.best_sim):
            chosen[m.best_event_id] = m
    kept = sorted(chosen.values(), key=lambda m: m.step_index)
    return AlignmentSet(
        AlignmentPair(m.best_event_id, m.step_id, m.best_sim, descs.get(m.best_event_id, ""),
                      g.desc(m.step_id) if g is not None else "")
        for m in kept
    )


def neighborhood_score(candidate: tuple[str, str], current: AlignmentSet, embedder) -> float:
    """Mean pair consistency of ``(event_desc, step_desc)`` against ``current``.

    Consistency with an aligned pair is the average of the event-to-event
    and step-to-step cosine similarities. An empty set scores 0.
    """
    if not current.pairs:
        return 0.0
    sims = _table(embedder)
    event_desc, step_desc = candidate
    total = 0.0
    for p in current.pairs:
        total += 0.5 * (sims(event_desc, p.event_desc) + sims(step_desc, p.step_desc))
    return total / len(current.pairs)


@dataclass(frozen=True)
class Expansion:
    final: AlignmentSet
    iterations: int
    sizes: tuple[int, ...]  # |A_final| after each iteration


def expand_alignment(
    traj: Trajectory,
    best_path: GuidelinePath,
    seed: AlignmentSet,
    cfg: BootstrapConfig,
    embedder,
    g: GuidelineKG,
) -> Expansion:
    """Bootstrap new pairs for unaligned events.

    Each round scores every unaligned event against every candidate step
    (the winning path's steps, or every guideline node with
    ``cfg.whole_graph``) as ``alpha * sim + (1 - alpha) * neighborhood``.
    An event takes the step with the highest weighted score strictly above
    ``theta`` (earliest step on ties). Pairs found in a round are added
    together at its end. The loop stops after the first round that adds
    nothing (including a round with no unaligned event left) or after
    ``cfg.max_iterations`` rounds; ``iterations`` counts rounds entered.
    """
    sims = _table(embedder)
    steps = sorted(n.step_id for n in g.nodes) if cfg.whole_graph else list(best_path.steps)
    step_descs = [(s, g.desc(s)) for s in steps]
    final = seed
    sizes = []
    iterations = 0
    while iterations < cfg.max_iterations:
        unaligned = [ev for ev in traj.events if ev.event_id not in final.aligned_events]
        iterations += 1
        new = []
        for ev in unaligned:
            best = None
            for step_id, desc in step_descs:
                s_sem = sims(ev.description, desc)
                s_hood = neighborhood_score((ev.description, desc), final, sims)
                weighted = cfg.alpha * s_sem + (1.0 - cfg.alpha) * s_hood
                if _q(weighted) > cfg.theta and (best is None or _q(weighted) > _q(best.confidence)):
                    best = AlignmentPair(ev.event_id, step_id, weighted, ev.description, desc)
            if best is not None:
                new.append(best)
        if new:
            final = final.union(new)
        sizes.append(len(final))
        if not new:
            break
    return Expansion(final, iterations, tuple(sizes))


# -- fusion and rendering --------------------------------------------------------


@dataclass(frozen=True)
class FusedNode:
    node_id: str
    layer: str  # "guideline" or "patient"
    kind: str
    label: str


@dataclass(frozen=True)
class FusedEdge:
    src: str
    dst: str
    label: str
    layer: str  # "guideline", "patient" or "evidence"
    weight: float | None = None


@dataclass(frozen=True)
class FusedGraph:
    nodes: tuple[FusedNode, ...]
    edges: tuple[FusedEdge, ...]

    @property
    def evidence(self) -> tuple[FusedEdge, ...]:
        return tuple(e for e in self.edges if e.layer == "evidence")

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.node_id, "layer": n.layer, "kind": n.kind, "label": n.label} for n in self.nodes],
            "edges": [
                {"src": e.src, "dst": e.dst, "label": e.label, "layer": e.layer,
                 **({"weight": round(e.weight, 12)} if e.weight is not None else {})}
                for e in self.edges
            ],
        }


def step_node_id(step_id: str) -> str:
    return f"step:{step_id}"


def entity_node_id(entity_id: str) -> str:
    return f"entity:{entity_id}"


def merge_graphs(g: GuidelineKG, t: TemporalKG, final: AlignmentSet) -> FusedGraph:
    entity_ids = {e.entity_id for e in t.entities}
    bad = [p for p in final if p.step_id not in g or p.event_id not in entity_ids]
    if bad:
        shown = ", ".join(f"({p.event_id}, {p.step_id})" for p in bad)
        raise ValidationError(f"alignment pairs with missing endpoints: {shown}", stage="merge")
    nodes = [FusedNode(step_node_id(n.step_id), "guideline", n.kind, n.desc) for n in g.nodes]
    nodes += [FusedNode(entity_node_id(e.entity_id), "patient", e.kind, e.description) for e in t.entities]
    edges = [FusedEdge(step_node_id(e.src), step_node_id(e.dst), e.rel_label, "guideline") for e in g.edges]
    edges += [FusedEdge(entity_node_id(r.src), entity_node_id(r.dst), r.rel_label, "patient") for r in t.relations]
    edges += [
        FusedEdge(step_node_id(p.step_id), entity_node_id(p.event_id), "evidenced_by", "evidence", p.confidence)
        for p in final
    ]
    nodes.sort(key=lambda n: n.node_id)
    edges.sort(key=lambda e: (e.src, e.dst, e.label))
    return FusedGraph(tuple(nodes), tuple(edges))


DEFAULT_CONTEXT_TEMPLATE = """\
## Longitudinal record
$trajectory

## Current record
$current

## Matched guideline path
$path
$evidence
## Clinical summary

## Clinical recommendation
"""

REQUIRED_SLOTS = ("trajectory", "path", "evidence")


def template_slots(template: str) -> set[str]:
    found = set()
    for m in string.Template.pattern.finditer(template):
        name = m.group("named") or m.group("braced")
        if name:
            found.add(name)
    return found


@dataclass(frozen=True)
class RenderedContext:
    text: str
    token_count: int
    evidence_lines: int


def render_context(fused: FusedGraph, traj: Trajectory, best: ScoredPath, template: str | None = None,
                   g: GuidelineKG | None = None) -> RenderedContext:
    template = DEFAULT_CONTEXT_TEMPLATE if template is None else template
    missing = [s for s in REQUIRED_SLOTS if s not in template_slots(template)]
    if missing:
        raise TemplateError(f"context template lacks slot(s): {', '.join('$' + s for s in missing)}",
                            stage="render")
    labels = {n.node_id: n.label for n in fused.nodes}

    traj_lines = [
        f"- {format_timestamp(ev.encounter_time)} #{ev.intra_order} [{ev.kind}] {ev.description}"
        for ev in traj.events
    ]
    last = traj.events[-1].encounter_time
    current_lines = [f"- [{ev.kind}] {ev.description}" for ev in traj.events if ev.encounter_time == last]
    path_lines = [
        f"{m.step_index + 1}. [{m.step_id}] {labels.get(step_node_id(m.step_id), m.step_id)}"
        f" (best match {m.best_event_id}, sim {m.best_sim:.4f})"
        for m in best.per_step_best
    ]
    path_head = f"path {best.path.path_id}, score {best.score:.4f}"
    evidence = fused.evidence
    if evidence:
        ev_lines = [
            f"EVIDENCE {e.src.removeprefix('step:')} <= {e.dst.removeprefix('entity:')}"
            f" (confidence {e.weight:.4f}): {labels[e.src]} <= {labels[e.dst]}"
            for e in evidence
        ]
        evidence_text = "\n## Guideline evidence\n" + "\n".join(ev_lines) + "\n"
    else:
        evidence_text = ""
    text = string.Template(template).safe_substitute(
        patient_id=traj.patient_id,
        trajectory="\n".join(traj_lines),
        current="\n".join(current_lines),
        path=path_head + "\n" + "\n".join(path_lines),
        evidence=evidence_text,
    )
    return RenderedContext(text, count_tokens(text), len(evidence))


def load_template(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(patient_id: str) -> str:
    """Filesystem-safe stem for per-patient artifacts.

    Ids that needed rewriting get a short digest suffix so distinct ids
    never share a stem.
    """
    stem = _SAFE.sub("_", patient_id)
    if stem and stem == patient_id and stem not in (".", ".."):
        return stem
    return f"{stem}-{hashlib.blake2b(patient_id.encode('utf-8'), digest_size=4).hexdigest()}"


# -- whole-patient driver --------------------------------------------------------


@dataclass
class PatientAlignment:
    patient_id: str
    candidates: list[ScoredPath]
    reranked: list[ScoredPath]
    seed: AlignmentSet
    expansion: Expansion
    fused: FusedGraph
    context: RenderedContext
    warnings: list[str]

    @property
    def best(self) -> ScoredPath:
        return self.reranked[0]

    def report(self) -> dict:
        best = self.best
        return {
            "patient_id": self.patient_id,
            "best_path": {"path_id": best.path.path_id, "steps": list(best.path.steps), "score": round(best.score, 12)},
            "candidates": [
                {"path_id": sp.path.path_id, "steps": list(sp.path.steps), "score": round(sp.score, 12)}
                for sp in self.candidates
            ],
            "reranked": [sp.path.path_id for sp in self.reranked],
            "per_step_best": [
                {"step_index": m.step_index, "step_id": m.step_id, "best_event_id": m.best_event_id,
                 "best_sim": round(m.best_sim, 12)}
                for m in best.per_step_best
            ],
            "seed_pairs": self.seed.to_list(),
            "final_pairs": self.expansion.final.to_list(),
            "iterations_used": self.expansion.iterations,
            "context_tokens": self.context.token_count,
            "warnings": list(self.warnings),
            "fused_graph": self.fused.to_dict(),
        }


def align_patient(
    tkg: TemporalKG,
    traj: Trajectory,
    g: GuidelineKG,
    paths: Sequence[GuidelinePath],
    embedder,
    reranker: RerankerProvider,
    cfg: BootstrapConfig,
    template: str | None = None,
) -> PatientAlignment:
    sims = _table(embedder)
    warnings: list[str] = []
    candidates = rank_paths(traj, paths, g, sims, cfg.top_n)
    reranked = rerank(traj, candidates, reranker, g, warnings)
    best = reranked[0]
    seed = seed_pairs(traj, best, cfg.theta, g)
    expansion = expand_alignment(traj, best.path, seed, cfg, sims, g)
    fused = merge_graphs(g, tkg, expansion.final)
    context = render_context(fused, traj, best, template, g)
    return PatientAlignment(traj.patient_id, candidates, reranked, seed, expansion, fused, context, warnings)
