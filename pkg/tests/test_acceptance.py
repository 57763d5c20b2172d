"""Acceptance criteria 1-9.

Each test is named ``test_criterion_<k>_...``; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

from __future__ import annotations

import filecmp
import itertools
import json
import random
import time
from pathlib import Path

import pytest

import oracles
from conftest import make_chain, make_graph, make_trajectory
from trajalign.alignment import (
    AlignmentSet,
    BootstrapConfig,
    SimilarityTable,
    StubReranker,
    align_patient,
    expand_alignment,
    rank_paths,
    score_path,
    seed_pairs,
)
from trajalign.cli import main
from trajalign.corpus import extract_events, condense, LexiconExtractor, RaritySummarizer, load_lexicon, read_corpus
from trajalign.embedding import HashEmbedder
from trajalign.errors import UndefinedCorrelationError
from trajalign.evaluation import StubJudge, judge_item, spearman, stratify_by_length
from trajalign.fixtures import LENGTH_TARGETS, synth_length_counts
from trajalign.guideline import GuidelinePath, load_guideline
from trajalign.tkg import dump_tkg, extract_trajectory, instantiate_tkg, load_catalog, read_tkg

VOCAB = (
    "biopsy stage chemotherapy radiotherapy surgery egfr her2 ct imaging progression "
    "metastasis adjuvant palliative follow up lung breast tumor node response"
).split()


def random_text(rng, max_words=4):
    return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, max_words)))


def random_instance(rng, max_events=12, max_steps=8):
    m, l = rng.randint(1, max_events), rng.randint(1, max_steps)
    events = [random_text(rng) for _ in range(m)]
    steps = [random_text(rng) for _ in range(l)]
    # reuse texts sometimes so exact ties show up
    for k in range(len(steps)):
        if rng.random() < 0.3:
            steps[k] = rng.choice(events)
    return events, steps


# -- criterion 1 -------------------------------------------------------------------


def test_criterion_1_score_path_matches_brute_force():
    rng = random.Random(101)
    start = time.perf_counter()
    ties_seen = 0
    for case in range(200):
        dim = rng.choice([16, 64, 384])
        events, steps = random_instance(rng)
        traj = make_trajectory(events)
        g, path = make_chain(steps)
        got = score_path(traj, path, g, HashEmbedder(dim=dim))
        exact = oracles.ExactSim(dim)
        total, picks = oracles.score_path(events, steps, exact)
        assert got.score == pytest.approx(total, abs=1e-9), case
        assert abs(got.score - sum(m.best_sim for m in got.per_step_best)) <= 1e-9
        for m, (i, v) in zip(got.per_step_best, picks):
            assert m.best_event_id == traj.events[i].event_id, (case, m)
            assert m.best_sim == pytest.approx(v, abs=1e-9)
        ties_seen += sum(
            1 for sd in steps if len({exact.key(sd, e) for e in events}) < len(events)
        )
    assert ties_seen > 0  # the generator actually exercises the tie rule
    assert time.perf_counter() - start < 10.0


# -- criterion 2 -------------------------------------------------------------------


def _random_path_set(rng, n_paths):
    events = [random_text(rng) for _ in range(rng.randint(2, 10))]
    pool = {f"N{k:02d}": random_text(rng) for k in range(12)}
    ids = sorted(pool)
    paths = []
    for k in range(n_paths):
        if paths and rng.random() < 0.25:
            steps = rng.choice(paths).steps  # duplicate -> guaranteed score tie
        else:
            steps = tuple(rng.sample(ids, rng.randint(1, 6)))
        paths.append(GuidelinePath(f"P{k:05d}", steps, k))
    return events, make_graph(pool), paths, pool


def test_criterion_2_rank_paths_matches_oracle_sort():
    rng = random.Random(202)
    tie_cases = 0
    for case in range(50):
        events, g, paths, pool = _random_path_set(rng, rng.randint(1, 25))
        traj = make_trajectory(events)
        ranked = rank_paths(traj, paths, g, HashEmbedder(dim=64), top_n=len(paths))
        exact = oracles.ExactSim(64)
        scores = [oracles.score_path(events, [pool[s] for s in p.steps], exact)[0] for p in paths]
        expected = sorted(range(len(paths)), key=lambda k: (-round(scores[k], 9), k))
        assert [sp.path.index for sp in ranked] == expected, case
        top = rank_paths(traj, paths, g, HashEmbedder(dim=64), top_n=3)
        assert [sp.path.index for sp in top] == expected[:3]
        if len({p.steps for p in paths}) < len(paths):
            tie_cases += 1
            for _ in range(100):
                again = rank_paths(traj, paths, g, HashEmbedder(dim=64), top_n=len(paths))
                assert [sp.path.index for sp in again] == expected
    assert tie_cases >= 5


# -- criterion 3 -------------------------------------------------------------------


def _expansion_instance(rng):
    events = [random_text(rng, 3) for _ in range(rng.randint(1, 12))]
    steps = [random_text(rng, 3) for _ in range(rng.randint(1, 8))]
    for k in range(len(events)):
        if rng.random() < 0.3:
            events[k] = rng.choice(steps) + " " + rng.choice(VOCAB)
    return events, steps


def test_criterion_3_bootstrapping_properties():
    rng = random.Random(303)
    start = time.perf_counter()
    grew = 0
    for case in range(200):
        events, steps = _expansion_instance(rng)
        traj = make_trajectory(events)
        g, path = make_chain(steps)
        emb = HashEmbedder(dim=64)
        sims = SimilarityTable(emb)
        best = score_path(traj, path, g, sims)
        seed = seed_pairs(traj, best, rng.choice([0.5, 0.6, 0.7]), g)
        iters = rng.randint(1, 10)
        theta = rng.choice([0.3, 0.45, 0.6])
        for alpha in (0.0, 0.5, 1.0):
            cfg = BootstrapConfig(alpha=alpha, theta=theta, max_iterations=iters)
            exp = expand_alignment(traj, path, seed, cfg, sims, g)
            # (a) bounded iterations
            assert 1 <= exp.iterations <= iters
            # (b) monotone growth from the seed
            sizes = (len(seed), *exp.sizes)
            assert all(a <= b for a, b in zip(sizes, sizes[1:]))
            assert seed.keys() <= exp.final.keys()
            assert len(exp.final.aligned_events) == len(exp.final.pairs)
            # (d) independent loop oracle
            ev_index = {ev.event_id: i for i, ev in enumerate(traj.events)}
            st_index = {s: j for j, s in enumerate(path.steps)}
            seed_map = {ev_index[p.event_id]: st_index[p.step_id] for p in seed.pairs}
            final, rounds, osizes = oracles.expand(events, seed_map, steps, alpha, theta, iters,
                                                   oracles.ExactSim(64).value)
            got = {ev_index[p.event_id]: st_index[p.step_id] for p in exp.final.pairs}
            assert got == final, (case, alpha)
            assert (exp.iterations, list(exp.sizes)) == (rounds, osizes)
            grew += len(exp.final.pairs) > len(seed.pairs)
        # (c) an unreachable threshold returns the seed exactly
        cfg = BootstrapConfig(alpha=0.5, theta=1.01, max_iterations=iters)
        assert expand_alignment(traj, path, seed, cfg, sims, g).final == seed
    assert grew > 50  # expansion is not vacuous on this generator
    assert time.perf_counter() - start < 30.0


# -- criterion 4 -------------------------------------------------------------------

IDENTITY_TEXTS = [
    "invasive ductal carcinoma confirmed by core biopsy",
    "stage IIA disease after staging work up",
    "neoadjuvant chemotherapy with docetaxel",
    "breast conserving surgery",
    "adjuvant whole breast radiotherapy",
    "endocrine therapy with tamoxifen",
    "surveillance mammogram every year",
]


@pytest.mark.parametrize("texts", [IDENTITY_TEXTS, IDENTITY_TEXTS[:1], IDENTITY_TEXTS[2:5]])
def test_criterion_4_identity_pipeline(texts):
    traj = make_trajectory(texts)
    g, path = make_chain(texts)
    emb = HashEmbedder()
    best = score_path(traj, path, g, emb)
    assert best.score == float(len(texts))
    assert all(m.best_sim == 1.0 for m in best.per_step_best)
    cfg = BootstrapConfig(alpha=1.0, theta=0.7)
    seed = seed_pairs(traj, best, cfg.theta, g)
    exp = expand_alignment(traj, path, seed, cfg, emb, g)
    assert exp.iterations == 1
    assert exp.sizes[0] == len(texts)
    assert exp.final.aligned_events == {ev.event_id for ev in traj.events}
    # same through the whole-patient driver
    tkg = instantiate_tkg(traj.events, load_catalog_stub(), "P")
    res = align_patient(tkg, traj, g, [path], emb, StubReranker(), cfg)
    assert res.best.score == float(len(texts))
    assert len(res.expansion.final) == len(texts) and res.expansion.iterations == 1


def load_catalog_stub():
    from trajalign.tkg import ConceptCatalog

    return ConceptCatalog(())


# -- criterion 5 -------------------------------------------------------------------


def test_criterion_5_spearman_closed_form_example():
    assert spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == 0.8


def test_criterion_5_spearman_tied_vectors_match_rank_pearson():
    rng = random.Random(505)
    checked = 0
    while checked < 1000:
        n = rng.randint(3, 50)
        k = rng.randint(2, 6)
        x = [rng.randint(1, k) for _ in range(n)]
        y = [rng.randint(1, rng.randint(2, 8)) for _ in range(n)]
        want = oracles.rank_pearson(x, y)
        if want is None:
            with pytest.raises(UndefinedCorrelationError):
                spearman(x, y)
            continue
        assert abs(spearman(x, y) - want) <= 1e-9
        checked += 1


def test_criterion_5_spearman_identity_and_reversal_exact():
    rng = random.Random(515)
    for _ in range(300):
        n = rng.randint(3, 50)
        x = [rng.randint(1, rng.randint(2, 60)) for _ in range(n)]
        if len(set(x)) == 1:
            continue
        assert spearman(x, x) == 1.0
        assert spearman(x, [-v for v in x]) == -1.0


# -- criterion 6 -------------------------------------------------------------------

ITEM = {"item_id": "x1", "task": "clinical_summary", "candidate_text": "text", "token_count": 10}


def test_criterion_6_ensemble_mean():
    judged = judge_item(ITEM, [StubJudge("a", 3), StubJudge("b", 4), StubJudge("c", 5)])
    for v in judged.ensemble.values():
        assert abs(v - 4.0) <= 1e-12
    assert abs(judged.overall - 4.0) <= 1e-12


def test_criterion_6_invalid_judge_excluded():
    judges = [StubJudge("a", (3, 3, 3, 3)), StubJudge("b", (7, 4, 4, 4)), StubJudge("c", (5, 5, 5, 5))]
    judged = judge_item(ITEM, judges)
    assert sorted(judged.per_judge) == ["a", "c"]
    assert all(abs(v - 4.0) <= 1e-12 for v in judged.ensemble.values())
    assert any("b" in w for w in judged.warnings)


def test_criterion_6_judge_order_invariance():
    rng = random.Random(606)
    for _ in range(50):
        judges = [StubJudge(f"j{k}", tuple(rng.randint(1, 5) for _ in range(4))) for k in range(3)]
        base = judge_item(ITEM, judges)
        for perm in itertools.permutations(judges):
            other = judge_item(ITEM, list(perm))
            assert other.ensemble == base.ensemble  # bit-identical floats
            assert other.overall == base.overall


# -- criterion 7 -------------------------------------------------------------------


def test_criterion_7_floor_split_sizes():
    for n in range(3, 501):
        rows = [(f"i{k:03d}", (k * 7919) % 97) for k in range(n)]
        sizes = [len(b.item_ids) for b in stratify_by_length(rows)]
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_criterion_7_generated_means_reproduced(seed):
    counts = synth_length_counts(seed=seed)
    rows = [(f"i{k:03d}", c) for k, c in enumerate(counts)]
    for bucket, target in zip(stratify_by_length(rows), LENGTH_TARGETS):
        assert abs(bucket.mean_tokens - target) <= 0.01 * target


def test_criterion_7_report_means(fixture_dir, tmp_path):
    assert main(["evaluate", "--config", str(fixture_dir / "config.toml"), "--out", str(tmp_path)]) == 0
    strata = json.loads((tmp_path / "evaluate" / "strata.json").read_text())
    assert [b["label"] for b in strata] == ["short", "medium", "long"]
    for b, target in zip(strata, LENGTH_TARGETS):
        assert abs(b["mean_tokens"] - target) <= 0.01 * target
    report = (tmp_path / "evaluate" / "report.txt").read_text()
    for target in LENGTH_TARGETS:
        assert f"{target:.3f}" in report


# -- criterion 8 -------------------------------------------------------------------


def _tree(root: Path):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


def _same_tree(a: Path, b: Path):
    files = _tree(a)
    assert files == _tree(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors, mismatch


def test_criterion_8_run_all_byte_identical(tmp_path):
    # two "hosts": fixture bundles generated at different absolute paths
    host_a, host_b = tmp_path / "host_a" / "data", tmp_path / "elsewhere" / "b" / "data"
    for host in (host_a, host_b):
        assert main(["gen-fixtures", "--out", str(host)]) == 0
    _same_tree(host_a, host_b)

    runs = []
    for host, out in ((host_a, "out1"), (host_a, "out2"), (host_b, "out3")):
        start = time.perf_counter()
        rc = main(["run-all", "--config", str(host / "config.toml"), "--out", str(host.parent / out),
                   "--dump-events", "--dump-tkg"])
        assert rc == 0
        assert time.perf_counter() - start < 60.0
        runs.append(host.parent / out)
    _same_tree(runs[0], runs[1])
    _same_tree(runs[0], runs[2])
    assert len(list((runs[0] / "ingest" / "tkg").glob("*.json"))) == 20
    text = "".join(p.read_text(errors="replace") for p in runs[0].rglob("*.json"))
    assert str(tmp_path) not in text


# -- criterion 9 -------------------------------------------------------------------


def test_criterion_9_tkg_round_trip(fixture_dir, tmp_path):
    records = read_corpus(fixture_dir / "corpus.jsonl")
    catalog = load_catalog(fixture_dir / "catalog.json")
    extractor = LexiconExtractor(load_lexicon(fixture_dir / "lexicon.json"))
    assert len(records) == 20
    for rec in records:
        events = extract_events(condense(rec, RaritySummarizer()), extractor).events
        assert events
        tkg = instantiate_tkg(events, catalog, rec.patient_id)
        path = tmp_path / f"{rec.patient_id}.json"
        dump_tkg(tkg, path)
        assert list(extract_trajectory(read_tkg(path)).events) == list(events)


def test_criterion_9_guideline_counts_match_manifest(fixture_dir):
    manifest = json.loads((fixture_dir / "fixture_manifest.json").read_text())
    g = load_guideline(fixture_dir / "guideline.json")
    got = {"guideline_nodes": len(g.nodes), "guideline_edges": len(g.edges), "guideline_roots": len(g.roots)}
    assert got == {k: manifest[k] for k in got}
    # counted by hand from the fixture source: 20 + 20 nodes, 27 + 24 edges, 2 roots
    assert got == {"guideline_nodes": 40, "guideline_edges": 51, "guideline_roots": 2}
