from __future__ import annotations

import re
from datetime import datetime, timedelta, timezone

import pytest

from trajalign.corpus import ClinicalEvent
from trajalign.guideline import GuidelineEdge, GuidelineKG, GuidelineNode, GuidelinePath
from trajalign.tkg import Trajectory

T0 = datetime(2021, 3, 1, 9, 0, tzinfo=timezone.utc)


def make_trajectory(descs, per_encounter=3, patient_id="P"):
    """Events with the given descriptions, ``per_encounter`` to a day."""
    events = tuple(
        ClinicalEvent(
            event_id=f"{patient_id}:e{i:03d}",
            description=d,
            kind="other",
            encounter_time=T0 + timedelta(days=i // per_encounter),
            intra_order=i % per_encounter,
        )
        for i, d in enumerate(descs)
    )
    return Trajectory(patient_id, events)


def make_chain(descs, prefix="S"):
    """Linear guideline over the descriptions plus the single path through it."""
    ids = [f"{prefix}{i:02d}" for i in range(len(descs))]
    g = GuidelineKG(
        nodes=tuple(GuidelineNode(s, "other", d) for s, d in zip(ids, descs)),
        edges=tuple(GuidelineEdge(a, b, "next") for a, b in zip(ids, ids[1:])),
        roots=(ids[0],),
    )
    return g, GuidelinePath("P00000", tuple(ids), 0)


def make_graph(descs_by_id):
    """Edge-less guideline holding arbitrary step descriptions, for scoring paths built by hand."""
    ids = sorted(descs_by_id)
    return GuidelineKG(
        nodes=tuple(GuidelineNode(s, "other", descs_by_id[s]) for s in ids),
        edges=(),
        roots=tuple(ids),
    )


# -- acceptance summary -------------------------------------------------------------

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        _results.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_results):
        outcomes = _results[k]
        ok = all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({len(outcomes)} checks)")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from trajalign.fixtures import write_fixtures

    out = tmp_path_factory.mktemp("fixtures")
    write_fixtures(out, seed=0)
    return out
