"""LLM-as-a-judge harness: rubric scoring, ensembles, rank agreement."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import random
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol, Sequence

import httpx
import numpy as np

from .embedding import post_json
from .errors import ConfigError, EvaluationError, ParseError, ProtocolError, ProviderError, UndefinedCorrelationError

log = logging.getLogger(__name__)

# wire/CSV key -> RubricScore attribute
DIMENSIONS = {
    "factual": "factual_accuracy",
    "completeness": "completeness",
    "soundness": "clinical_soundness",
    "actionability": "actionability",
}
TASKS = ("clinical_summary", "clinical_recommendation")
ENSEMBLE_ID = "llm_ensemble"
REFERENCE_MEAN_ID = "reference_mean"


def default_rubric() -> str:
    return resources.files("trajalign").joinpath("data/rubric.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class RubricScore:
    factual_accuracy: int
    completeness: int
    clinical_soundness: int
    actionability: int

    def __post_init__(self):
        for key, attr in DIMENSIONS.items():
            value = getattr(self, attr)
            if type(value) is not int or not 1 <= value <= 5:
                raise ValueError(f"{key} score must be an integer in 1..5, got {value!r}")

    @classmethod
    def from_wire(cls, scores) -> "RubricScore":
        if not isinstance(scores, dict):
            raise ValueError("scores must be an object")
        missing = [k for k in DIMENSIONS if k not in scores]
        if missing:
            raise ValueError(f"missing dimension(s): {', '.join(missing)}")
        return cls(**{attr: scores[key] for key, attr in DIMENSIONS.items()})

    def values(self) -> tuple[int, int, int, int]:
        return tuple(getattr(self, attr) for attr in DIMENSIONS.values())

    @property
    def overall(self) -> float:
        return sum(self.values()) / 4

    def to_wire(self) -> dict:
        return dict(zip(DIMENSIONS, self.values()))


# -- judges ----------------------------------------------------------------------


class JudgeProvider(Protocol):
    judge_id: str

    def score(self, rubric: str, item: dict) -> dict: ...


def _stable_seed(*parts) -> int:
    digest = hashlib.blake2b(":".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class StubJudge:
    """Offline judge: fixed scores, or seeded pseudo-random ones per item."""

    def __init__(self, judge_id: str, fixed=None, seed: int = 0):
        self.judge_id = judge_id
        if isinstance(fixed, int):
            fixed = (fixed,) * 4
        self.fixed = tuple(fixed) if fixed is not None else None
        self.seed = seed

    def score(self, rubric, item):
        if self.fixed is not None:
            return dict(zip(DIMENSIONS, self.fixed))
        rng = random.Random(_stable_seed(self.seed, self.judge_id, item.get("item_id")))
        return {k: rng.randint(1, 5) for k in DIMENSIONS}


class RemoteJudge:
    """Client for ``POST {endpoint}/judge``: ``{"rubric", "item"}`` -> ``{"scores": {...}}``."""

    def __init__(self, judge_id: str, endpoint: str, token: str | None = None, timeout: float = 120.0,
                 max_retries: int = 2, transport: httpx.BaseTransport | None = None):
        self.judge_id = judge_id
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(base_url=endpoint.rstrip("/"), headers=headers, timeout=timeout, transport=transport)
        self.max_retries = max_retries

    def score(self, rubric, item):
        reply = post_json(self.client, "/judge", {"rubric": rubric, "item": item}, self.max_retries, stage="judge")
        if "scores" not in reply:
            raise ProtocolError("judge reply lacks 'scores'", stage="judge")
        return reply["scores"]


def make_judges(stub: bool, judge_ids: Sequence[str] = ("judge_a", "judge_b", "judge_c"), fixed=None,
                seed: int = 0, endpoints: Sequence[str] | None = None, transport=None) -> list:
    if stub:
        return [StubJudge(j, fixed, seed) for j in judge_ids]
    if endpoints is None:
        endpoints = [e.strip() for e in os.environ.get("JUDGE_ENDPOINTS", "").split(",") if e.strip()]
    if not endpoints:
        raise ConfigError("remote judges need JUDGE_ENDPOINTS (or enable stub judges)")
    judges = []
    for k, ep in enumerate(endpoints):
        token = os.environ.get(f"JUDGE_TOKEN_{k}") or os.environ.get("JUDGE_TOKEN")
        jid = judge_ids[k] if k < len(judge_ids) else f"judge_{k}"
        judges.append(RemoteJudge(jid, ep, token=token, transport=transport))
    return judges


@dataclass(frozen=True)
class JudgedItem:
    item_id: str
    task: str
    per_judge: dict = field(hash=False)  # judge_id -> RubricScore
    ensemble: dict = field(hash=False)  # wire dimension -> mean score
    overall: float
    token_count: int = 0
    method: str = "default"
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "task": self.task,
            "method": self.method,
            "token_count": self.token_count,
            "per_judge": {j: s.to_wire() for j, s in sorted(self.per_judge.items())},
            "ensemble": self.ensemble,
            "overall": self.overall,
            "warnings": list(self.warnings),
        }


def judge_item(item: dict, judges: Sequence[JudgeProvider], rubric: str | None = None) -> JudgedItem:
    """Collect rubric scores from every judge and average the valid ones.

    A judge whose reply is malformed, out of range, or who fails outright
    is dropped for this item with a warning. Means are taken over integer
    sums, so they do not depend on judge order.
    """
    if not judges:
        raise EvaluationError("at least one judge is required", stage="judge")
    rubric = default_rubric() if rubric is None else rubric
    item_id = str(item.get("item_id"))
    accepted: dict[str, RubricScore] = {}
    warnings = []
    for judge in judges:
        try:
            accepted[judge.judge_id] = RubricScore.from_wire(judge.score(rubric, item))
        except (ValueError, TypeError, ProviderError) as exc:
            msg = f"item {item_id}: judge {judge.judge_id} excluded ({exc})"
            log.warning(msg)
            warnings.append(msg)
    if not accepted:
        raise EvaluationError(f"item {item_id}: every judge failed", stage="judge")
    n = len(accepted)
    ensemble = {
        key: sum(getattr(s, attr) for s in accepted.values()) / n for key, attr in DIMENSIONS.items()
    }
    overall = sum(ensemble[k] for k in DIMENSIONS) / 4
    return JudgedItem(
        item_id=item_id,
        task=str(item.get("task", "")),
        per_judge=accepted,
        ensemble=ensemble,
        overall=overall,
        token_count=int(item.get("token_count", 0) or 0),
        method=str(item.get("method", "default")),
        warnings=tuple(warnings),
    )


def shuffle_items(items: Sequence, seed: int) -> list:
    if type(seed) is not int or not 0 <= seed < 2**64:
        raise ValueError("seed must be an integer in [0, 2**64)")
    out = list(items)
    random.Random(seed).shuffle(out)
    return out


def evaluate_items(items: Sequence[dict], judges, seed: int, rubric: str | None = None,
                   parallelism: int = 1) -> list[JudgedItem]:
    """Judge items in a seeded shuffled order; results come back in that order."""
    order = shuffle_items(items, seed)
    rubric = default_rubric() if rubric is None else rubric
    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            return list(pool.map(lambda it: judge_item(it, judges, rubric), order))
    return [judge_item(it, judges, rubric) for it in order]


# -- rank correlation --------------------------------------------------------------


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho.

    Without ties this is 1 - 6*sum(d^2) / (n*(n^2 - 1)) on the rank
    differences d. With ties it is the Pearson correlation of the average
    ranks. Raises UndefinedCorrelationError when either side is constant.
    """
    if len(x) != len(y):
        raise ValueError("sequences differ in length")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 samples")
    rx, ry = average_ranks(x), average_ranks(y)
    tied = len(set(x)) < n or len(set(y)) < n
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise UndefinedCorrelationError("rank variance is zero; correlation undefined")
    if not tied:
        d2 = sum(int(a - b) ** 2 for a, b in zip(rx, ry))
        return 1 - 6 * d2 / (n * (n * n - 1))
    # doubled average ranks are integers, so the moments are exact
    a = [int(2 * r) for r in rx]
    b = [int(2 * r) for r in ry]
    sxy = n * sum(p * q for p, q in zip(a, b)) - sum(a) * sum(b)
    sxx = n * sum(p * p for p in a) - sum(a) ** 2
    syy = n * sum(q * q for q in b) - sum(b) ** 2
    prod = sxx * syy
    root = math.isqrt(prod)
    rho = sxy / root if root * root == prod else sxy / math.sqrt(prod)
    return max(-1.0, min(1.0, rho))


@dataclass(frozen=True)
class CorrelationReport:
    scope: str
    rater_a: str
    rater_b: str
    n: int
    rho: float

    def to_dict(self) -> dict:
        return {"scope": self.scope, "pairing": [self.rater_a, self.rater_b], "n": self.n, "rho": self.rho}


@dataclass(frozen=True)
class ReferenceRating:
    item_id: str
    rater_id: str
    score: RubricScore


REFERENCE_HEADER = ("item_id", "rater_id", "factual", "completeness", "soundness", "actionability")


def read_reference(path) -> list[ReferenceRating]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(h not in reader.fieldnames for h in REFERENCE_HEADER):
            raise ParseError(f"reference CSV header must contain {','.join(REFERENCE_HEADER)}", stage="reference")
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            key = (row["item_id"], row["rater_id"])
            if key in seen:
                raise ParseError(f"duplicate rating for item {key[0]} by {key[1]}", line=lineno, stage="reference")
            seen.add(key)
            try:
                score = RubricScore.from_wire({k: int(row[k]) for k in DIMENSIONS})
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno, stage="reference") from exc
            rows.append(ReferenceRating(row["item_id"], row["rater_id"], score))
    return rows


def correlate_with_reference(judged: Sequence[JudgedItem], reference: Sequence[ReferenceRating]
                             ) -> tuple[list[CorrelationReport], list[str]]:
    """Spearman agreement of the ensemble with each reference rater and with their mean.

    Scores compared are per-item overall means over the four dimensions.
    Scopes are "all" plus one per task when several tasks are present.
    Pairings with fewer than 3 shared items or constant scores are skipped
    with a notice; low correlations are reported as they are.
    """
    by_item = {j.item_id: j for j in judged}
    unknown = sorted({r.item_id for r in reference} - set(by_item))
    if unknown:
        raise EvaluationError(f"reference rates unknown item(s): {', '.join(unknown)}", stage="correlate")
    raters: dict[str, dict[str, float]] = defaultdict(dict)
    for r in reference:
        raters[r.rater_id][r.item_id] = r.score.overall
    pooled: dict[str, list[float]] = defaultdict(list)
    for rid in sorted(raters):
        for item_id, s in raters[rid].items():
            pooled[item_id].append(s)
    columns = {rid: raters[rid] for rid in sorted(raters)}
    columns[REFERENCE_MEAN_ID] = {i: sum(v) / len(v) for i, v in pooled.items()}

    tasks = sorted({j.task for j in judged})
    scopes = [("all", None)] + ([(t, t) for t in tasks] if len(tasks) > 1 else [])
    reports, notices = [], []
    for scope, task in scopes:
        for rid, col in columns.items():
            ids = sorted(i for i in col if task is None or by_item[i].task == task)
            if len(ids) < 3:
                notices.append(f"{scope}: {ENSEMBLE_ID} vs {rid} skipped ({len(ids)} shared items, need 3)")
                continue
            try:
                rho = spearman([by_item[i].overall for i in ids], [col[i] for i in ids])
            except UndefinedCorrelationError as exc:
                notices.append(f"{scope}: {ENSEMBLE_ID} vs {rid} skipped ({exc})")
                continue
            reports.append(CorrelationReport(scope, ENSEMBLE_ID, rid, len(ids), rho))
    return reports, notices


# -- length stratification ---------------------------------------------------------

BUCKET_LABELS = ("short", "medium", "long")


@dataclass(frozen=True)
class LengthBucket:
    label: str
    token_range: tuple[int, int]
    item_ids: tuple[str, ...]
    mean_tokens: float
    mean_score: float | None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "token_range": list(self.token_range),
            "n": len(self.item_ids),
            "item_ids": list(self.item_ids),
            "mean_tokens": self.mean_tokens,
            "mean_score": self.mean_score,
        }


def stratify_by_length(items: Sequence[tuple]) -> list[LengthBucket] | None:
    """Split ``(item_id, token_count[, score])`` rows into length terciles.

    Rows sort by token count then item id and are cut at floor(n/3) and
    floor(2n/3). Fewer than 3 rows returns None.
    """
    if len(items) < 3:
        log.info("stratification skipped: %d item(s), need 3", len(items))
        return None
    rows = sorted(items, key=lambda r: (r[1], str(r[0])))
    n = len(rows)
    cuts = (0, n // 3, 2 * n // 3, n)
    buckets = []
    for label, lo, hi in zip(BUCKET_LABELS, cuts, cuts[1:]):
        part = rows[lo:hi]
        scores = [r[2] for r in part if len(r) > 2 and r[2] is not None]
        buckets.append(
            LengthBucket(
                label=label,
                token_range=(part[0][1], part[-1][1]) if part else (0, 0),
                item_ids=tuple(str(r[0]) for r in part),
                mean_tokens=sum(r[1] for r in part) / len(part) if part else float("nan"),
                mean_score=sum(scores) / len(scores) if scores else None,
            )
        )
    return buckets


# -- descriptive statistics and I/O -----------------------------------------------


def describe(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"n": 0, "mean": None, "std": None, "q1": None, "median": None, "q3": None}
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
    }


def summary_rows(judged: Sequence[JudgedItem]) -> list[dict]:
    """Distribution of ensemble overall scores per (method, task)."""
    groups: dict[tuple[str, str], list[float]] = defaultdict(list)
    for j in judged:
        groups[(j.method, j.task)].append(j.overall)
    return [{"method": m, "task": t, **describe(v)} for (m, t), v in sorted(groups.items())]


def read_items(path) -> list[dict]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", line=lineno, stage="items") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("item_id"), str):
                raise ParseError("item needs a string item_id", line=lineno, field="item_id", stage="items")
            if obj.get("task") not in TASKS:
                raise ParseError(f"task must be one of {', '.join(TASKS)}", line=lineno, field="task", stage="items")
            tc = obj.get("token_count", 0)
            if type(tc) is not int or tc < 0:
                raise ParseError("token_count must be a nonnegative integer", line=lineno, field="token_count",
                                 stage="items")
            items.append(obj)
    ids = [it["item_id"] for it in items]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate item_id in items file", stage="items")
    return items


def format_table(rows: Sequence[dict], columns: Sequence[str], sep: str = "  ") -> str:
    """Fixed-width text table; floats get three decimals."""

    def cell(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = [sep.join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += [sep.join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(line.rstrip() for line in lines) + "\n"
