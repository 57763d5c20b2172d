"""Normative guideline graph loading and path enumeration."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ParseError, PreconditionError, ValidationError

NODE_KINDS = ("Cancer", "ClinicalSituation", "Treatment", "other")

DEFAULT_MAX_DEPTH = 12
DEFAULT_MAX_PATHS = 10_000


@dataclass(frozen=True)
class GuidelineNode:
    step_id: str
    kind: str
    desc: str


@dataclass(frozen=True)
class GuidelineEdge:
    src: str
    dst: str
    rel_label: str = ""


@dataclass(frozen=True)
class GuidelineKG:
    nodes: tuple[GuidelineNode, ...]
    edges: tuple[GuidelineEdge, ...]
    roots: tuple[str, ...]

    def __post_init__(self):
        nodes = {n.step_id: n for n in self.nodes}
        adj: dict[str, list[str]] = {sid: [] for sid in nodes}
        for e in self.edges:
            if e.src in adj and e.dst not in adj[e.src]:
                adj[e.src].append(e.dst)
        object.__setattr__(self, "_nodes", nodes)
        object.__setattr__(self, "_adj", {k: tuple(sorted(v)) for k, v in adj.items()})

    def node(self, step_id: str) -> GuidelineNode:
        return self._nodes[step_id]

    def desc(self, step_id: str) -> str:
        return self._nodes[step_id].desc

    def successors(self, step_id: str) -> tuple[str, ...]:
        return self._adj[step_id]

    def __contains__(self, step_id):
        return step_id in self._nodes

    def has_edge(self, src: str, dst: str) -> bool:
        return dst in self._adj.get(src, ())

    @property
    def sinks(self) -> tuple[str, ...]:
        return tuple(sorted(k for k, v in self._adj.items() if not v))


def guideline_from_dict(data: dict) -> GuidelineKG:
    if not isinstance(data, dict):
        raise ParseError("guideline must be a JSON object", stage="guideline")
    try:
        nodes = [
            GuidelineNode(str(n["id"]), n.get("kind") if n.get("kind") in NODE_KINDS else "other", str(n.get("desc", "")))
            for n in data.get("nodes", [])
        ]
        edges = [GuidelineEdge(str(e["src"]), str(e["dst"]), str(e.get("rel", ""))) for e in data.get("edges", [])]
        roots = [str(r) for r in data.get("roots", [])]
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed guideline entry: {exc}", stage="guideline") from exc

    problems = []
    if not nodes:
        problems.append("guideline has no nodes")
    ids = [n.step_id for n in nodes]
    seen = set()
    for sid in ids:
        if sid in seen:
            problems.append(f"duplicate node id {sid!r}")
        seen.add(sid)
    problems += [f"node {n.step_id!r} has an empty desc" for n in nodes if not n.desc.strip()]
    problems += [
        f"edge {e.src}->{e.dst} references a missing node" for e in edges if e.src not in seen or e.dst not in seen
    ]
    problems += [f"root {r!r} is not a node" for r in roots if r not in seen]
    if problems:
        raise ValidationError("; ".join(problems), stage="guideline")
    return GuidelineKG(tuple(nodes), tuple(edges), tuple(dict.fromkeys(roots)))


def load_guideline(path) -> GuidelineKG:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"guideline is not valid JSON: {exc.msg}", line=exc.lineno, stage="guideline") from exc
    return guideline_from_dict(data)


@dataclass(frozen=True)
class GuidelinePath:
    path_id: str
    steps: tuple[str, ...]
    index: int

    def __len__(self):
        return len(self.steps)


def enumerate_paths(
    g: GuidelineKG, max_depth: int = DEFAULT_MAX_DEPTH, max_paths: int = DEFAULT_MAX_PATHS
) -> tuple[list[GuidelinePath], bool]:
    """Simple root-to-sink paths of at most ``max_depth`` steps.

    Roots and successors are visited in sorted order, so depth-first
    discovery order is already lexicographic by step sequence (no found
    path can be a prefix of another, since each ends at a sink). Returns the
    paths and whether the list was cut at ``max_paths``.
    """
    if max_depth < 1 or max_paths < 1:
        raise PreconditionError("max_depth and max_paths must be >= 1", stage="enumerate")
    if not g.roots:
        raise ValidationError("guideline declares no roots; list entry steps under \"roots\"", stage="enumerate")

    found: list[tuple[str, ...]] = []
    truncated = False
    for root in sorted(g.roots):
        stack = [(root, 0)]
        on_path = {root}
        while stack:
            node, i = stack[-1]
            succ = g.successors(node)
            if i == 0 and not succ:
                if len(found) == max_paths:
                    truncated = True
                    break
                found.append(tuple(n for n, _ in stack))
            # advance to the next unvisited successor within the depth limit
            while i < len(succ) and (succ[i] in on_path or len(stack) >= max_depth):
                i += 1
            if i < len(succ):
                stack[-1] = (node, i + 1)
                stack.append((succ[i], 0))
                on_path.add(succ[i])
            else:
                stack.pop()
                on_path.discard(node)
        if truncated:
            break
    paths = [GuidelinePath(f"P{k:05d}", steps, k) for k, steps in enumerate(found)]
    return paths, truncated
