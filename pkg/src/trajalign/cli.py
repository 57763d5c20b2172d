"""Command-line entry point: ingest, align, evaluate, run-all, gen-fixtures."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .alignment import align_patient, load_template, make_reranker, safe_name
from .config import PipelineConfig, load_config, with_overrides
from .corpus import LexiconExtractor, RaritySummarizer, condense, extract_events, load_lexicon, read_corpus, write_events
from .embedding import make_embedder
from .errors import ConfigError, PipelineError
from .evaluation import (
    correlate_with_reference,
    default_rubric,
    evaluate_items,
    format_table,
    make_judges,
    read_items,
    read_reference,
    stratify_by_length,
    summary_rows,
)
from .fixtures import write_fixtures
from .guideline import enumerate_paths, load_guideline
from .plotting import plot_alignment_summary, plot_correlations, plot_strata
from .tkg import TemporalKG, dump_tkg, extract_trajectory, instantiate_tkg, load_catalog, read_tkg
from .tokens import count_tokens

log = logging.getLogger("trajalign")


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_tsv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    """Mutable bookkeeping for one CLI invocation; rendered into the manifest."""

    cfg: PipelineConfig
    command: str
    record_timings: bool = False

    def __post_init__(self):
        self.out = self.cfg.resolve("out")
        self.inputs: dict[str, dict] = {}
        self.stages: dict[str, dict] = {}
        self.timings: dict[str, float] = {}

    def note_input(self, name: str, path: Path) -> None:
        self.inputs[name] = {"path": getattr(self.cfg.paths, name), "sha256": sha256_file(path)}

    def manifest(self) -> dict:
        config = self.cfg.to_dict()
        config["paths"].pop("out")
        m = {
            "tool": "trajalign",
            "version": __version__,
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "config": config,
            "inputs": self.inputs,
            "stages": self.stages,
        }
        if self.record_timings:
            m["timings_s"] = {k: round(v, 3) for k, v in self.timings.items()}
        return m


def _map(cfg: PipelineConfig, fn, items):
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(cfg.parallelism) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- stages ------------------------------------------------------------------------


def stage_ingest(run: Run, write_tkg: bool, write_events_: bool) -> list[TemporalKG]:
    cfg = run.cfg
    t0 = time.perf_counter()
    paths = cfg.require("corpus", "catalog")
    for name, p in paths.items():
        run.note_input(name, p)
    lexicon_path = cfg.resolve("lexicon")
    lexicon = None
    if lexicon_path is not None:
        lexicon = load_lexicon(cfg.require("lexicon")["lexicon"])
        run.note_input("lexicon", lexicon_path)
    records = read_corpus(paths["corpus"])
    catalog = load_catalog(paths["catalog"])
    summarizer = RaritySummarizer()
    extractor = LexiconExtractor(lexicon)

    def work(record):
        condensed = condense(record, summarizer, cfg.limits.context_tokens, cfg.limits.history_share)
        extraction = extract_events(condensed, extractor)
        tkg = instantiate_tkg(extraction.events, catalog, record.patient_id)
        return record, condensed, extraction, tkg

    results = _map(cfg, work, records)
    out = run.out / "ingest"
    rows, warnings, tkgs = [], [], []
    for record, condensed, extraction, tkg in results:
        stem = safe_name(record.patient_id)
        warnings.extend(extraction.warnings)
        if condensed.recent_truncated:
            warnings.append(f"patient {record.patient_id}: latest note truncated to fit the context cap")
        if write_tkg:
            (out / "tkg").mkdir(parents=True, exist_ok=True)
            dump_tkg(tkg, out / "tkg" / f"{stem}.json")
        if write_events_:
            (out / "events").mkdir(parents=True, exist_ok=True)
            with open(out / "events" / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
                write_events(extraction.events, fh)
            (out / "condensed").mkdir(parents=True, exist_ok=True)
            (out / "condensed" / f"{stem}.txt").write_text(condensed.combined + "\n", encoding="utf-8")
        rows.append({
            "patient_id": record.patient_id,
            "documents": len(record.documents),
            "events": len(extraction.events),
            "encounters": len(tkg.timestamps),
            "relations": len(tkg.relations),
            "unlinked": tkg.unlinked_count,
            "context_tokens": condensed.token_count,
        })
        tkgs.append(tkg)
    if write_tkg or write_events_:
        write_tsv(out / "summary.tsv", rows, list(rows[0]) if rows else ["patient_id"])
    run.stages["ingest"] = {
        "patients": len(records),
        "events": sum(r["events"] for r in rows),
        "unlinked_entities": sum(r["unlinked"] for r in rows),
        "warnings": warnings,
    }
    run.timings["ingest"] = time.perf_counter() - t0
    log.info("ingest: %d patients in %.2fs", len(records), run.timings["ingest"])
    return tkgs


def load_ingested(run: Run) -> list[TemporalKG]:
    tkg_dir = run.out / "ingest" / "tkg"
    if not tkg_dir.is_dir():
        raise ConfigError(f"no ingest output under {tkg_dir}; run `trajalign ingest` first", stage="align")
    return [read_tkg(p) for p in sorted(tkg_dir.glob("*.json"))]


def stage_align(run: Run, tkgs: list[TemporalKG]) -> None:
    cfg = run.cfg
    t0 = time.perf_counter()
    gpath = cfg.require("guideline")["guideline"]
    run.note_input("guideline", gpath)
    g = load_guideline(gpath)
    template = None
    if cfg.resolve("template") is not None:
        tpath = cfg.require("template")["template"]
        run.note_input("template", tpath)
        template = load_template(tpath)
    paths, truncated = enumerate_paths(g, cfg.limits.max_depth, cfg.limits.max_paths)
    embedder = make_embedder(cfg.embedding)
    reranker = make_reranker(cfg.providers.stub_reranker, cfg.providers.rerank_endpoint or None)
    warnings = []
    if truncated:
        warnings.append(f"path enumeration truncated at {cfg.limits.max_paths} paths")

    usable = []
    for tkg in tkgs:
        if tkg.entities:
            usable.append(tkg)
        else:
            warnings.append(f"patient {tkg.patient_id}: no events, alignment skipped")

    def work(tkg):
        return align_patient(tkg, extract_trajectory(tkg), g, paths, embedder, reranker, cfg.bootstrap, template)

    results = _map(cfg, work, usable)
    out = run.out / "align"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for res in results:
        stem = safe_name(res.patient_id)
        write_json(out / f"{stem}.json", res.report())
        (out / f"{stem}.context.txt").write_text(res.context.text, encoding="utf-8")
        warnings.extend(res.warnings)
        if res.context.token_count > cfg.limits.context_tokens:
            warnings.append(f"patient {res.patient_id}: rendered context exceeds the context cap")
        rows.append({
            "patient_id": res.patient_id,
            "best_path": res.best.path.path_id,
            "best_score": res.best.score,
            "path_length": len(res.best.path),
            "events": len(res.fused.nodes) - len(g.nodes),
            "seed_pairs": len(res.seed),
            "final_pairs": len(res.expansion.final),
            "iterations": res.expansion.iterations,
            "context_tokens": res.context.token_count,
        })
    write_tsv(out / "summary.tsv", rows, ["patient_id", "best_path", "best_score", "path_length", "events",
                                          "seed_pairs", "final_pairs", "iterations", "context_tokens"])
    if rows:
        plot_alignment_summary(rows, out / "scores.png")
    run.stages["align"] = {
        "patients": len(rows),
        "paths_enumerated": len(paths),
        "paths_truncated": truncated,
        "seed_pairs": sum(r["seed_pairs"] for r in rows),
        "final_pairs": sum(r["final_pairs"] for r in rows),
        "warnings": warnings,
    }
    run.timings["align"] = time.perf_counter() - t0
    log.info("align: %d patients in %.2fs", len(rows), run.timings["align"])


def stage_evaluate(run: Run) -> None:
    cfg = run.cfg
    t0 = time.perf_counter()
    ipath = cfg.require("items")["items"]
    run.note_input("items", ipath)
    items = read_items(ipath)
    rubric = default_rubric()
    if cfg.resolve("rubric") is not None:
        rpath = cfg.require("rubric")["rubric"]
        run.note_input("rubric", rpath)
        rubric = rpath.read_text(encoding="utf-8")
    prov = cfg.providers
    judges = make_judges(prov.stub_judges, prov.judges, prov.judge_fixed or None, cfg.seed)
    judged = evaluate_items(items, judges, cfg.seed, rubric, cfg.parallelism)

    warnings = [w for j in judged for w in j.warnings]
    for it in items:
        n = count_tokens(str(it.get("candidate_text", "")))
        if n > cfg.limits.output_tokens:
            warnings.append(f"item {it['item_id']}: candidate text has {n} tokens, above the output cap")

    out = run.out / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "judged.json", [dict(j.to_dict(), position=k) for k, j in enumerate(judged)])

    reports, notices = [], []
    if cfg.resolve("reference") is not None:
        refpath = cfg.require("reference")["reference"]
        run.note_input("reference", refpath)
        reports, notices = correlate_with_reference(judged, read_reference(refpath))
    write_json(out / "correlations.json", {"reports": [r.to_dict() for r in reports], "notices": notices})

    buckets = stratify_by_length([(j.item_id, j.token_count, j.overall) for j in judged])
    if buckets is None:
        notices.append("stratification skipped: fewer than 3 items")
    write_json(out / "strata.json", [b.to_dict() for b in buckets] if buckets else [])

    stats = summary_rows(judged)
    stat_cols = ["method", "task", "n", "mean", "std", "q1", "median", "q3"]
    write_tsv(out / "summary.tsv", stats, stat_cols)
    sections = ["Ensemble overall score by method and task", format_table(stats, stat_cols)]
    if reports:
        corr_rows = [{"scope": r.scope, "pairing": f"{r.rater_a} vs {r.rater_b}", "n": r.n, "rho": r.rho}
                     for r in reports]
        sections += ["Spearman agreement with reference ratings", format_table(corr_rows, ["scope", "pairing", "n", "rho"])]
        plot_correlations(reports, out / "correlations.png")
    if buckets:
        strata_rows = [{"bucket": b.label, "n": len(b.item_ids), "min_tokens": b.token_range[0],
                        "max_tokens": b.token_range[1], "mean_tokens": b.mean_tokens, "mean_score": b.mean_score}
                       for b in buckets]
        sections += ["Record-length terciles",
                     format_table(strata_rows, ["bucket", "n", "min_tokens", "max_tokens", "mean_tokens", "mean_score"])]
        plot_strata(buckets, out / "strata.png")
    if notices:
        sections += ["Notices", "\n".join(notices) + "\n"]
    (out / "report.txt").write_text("\n".join(sections), encoding="utf-8")
    run.stages["evaluate"] = {
        "items": len(judged),
        "correlations": len(reports),
        "notices": notices,
        "warnings": warnings,
    }
    run.timings["evaluate"] = time.perf_counter() - t0
    log.info("evaluate: %d items in %.2fs", len(judged), run.timings["evaluate"])


# -- commands ----------------------------------------------------------------------


def _finish(run: Run, manifest_path: Path) -> None:
    write_json(manifest_path, run.manifest())
    for stage, info in run.stages.items():
        for w in info.get("warnings", []):
            log.warning("%s: %s", stage, w)


def cmd_ingest(cfg, opts) -> Run:
    run = Run(cfg, "ingest", opts.record_timings)
    stage_ingest(run, write_tkg=True, write_events_=opts.dump_events)
    _finish(run, run.out / "ingest" / "manifest.json")
    return run


def cmd_align(cfg, opts) -> Run:
    run = Run(cfg, "align", opts.record_timings)
    stage_align(run, load_ingested(run))
    _finish(run, run.out / "align" / "manifest.json")
    return run


def cmd_evaluate(cfg, opts) -> Run:
    run = Run(cfg, "evaluate", opts.record_timings)
    stage_evaluate(run)
    _finish(run, run.out / "evaluate" / "manifest.json")
    return run


def cmd_run_all(cfg, opts) -> Run:
    run = Run(cfg, "run-all", opts.record_timings)
    tkgs = stage_ingest(run, write_tkg=opts.dump_tkg, write_events_=opts.dump_events)
    stage_align(run, tkgs)
    stage_evaluate(run)
    _finish(run, run.out / "manifest.json")
    return run


COMMANDS = {"ingest": cmd_ingest, "align": cmd_align, "evaluate": cmd_evaluate, "run-all": cmd_run_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajalign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML pipeline config")
    common.add_argument("--out", help="output directory (overrides paths.out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--theta", type=float, help="alignment confidence threshold")
    common.add_argument("--alpha", type=float, help="weight of direct similarity in bootstrapping")
    common.add_argument("--iterations", type=int, dest="max_iterations", help="bootstrapping iterations")
    common.add_argument("--top-n", type=int, help="candidate paths passed to the reranker")
    common.add_argument("--embedder", choices=["hash", "remote"])
    common.add_argument("--stub-judges", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--stub-reranker", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--parallelism", type=int)
    common.add_argument("--dump-events", action="store_true", help="write extracted events and condensed text")
    common.add_argument("--dump-tkg", action="store_true", help="run-all: also write per-patient TKG dumps")
    common.add_argument("--record-timings", action="store_true",
                        help="add wall-clock stage timings to the manifest (breaks byte-identical reruns)")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])

    gen = sub.add_parser("gen-fixtures", help="write the synthetic fixture bundle")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--patients", type=int, default=20)
    gen.add_argument("--items", type=int, default=24)
    return parser


def main(argv=None) -> int:
    opts = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(opts.verbose, 2), format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if opts.command == "gen-fixtures":
            manifest = write_fixtures(opts.out, opts.seed, opts.patients, opts.items)
            print(json.dumps(manifest, sort_keys=True))
            return 0
        cfg = load_config(opts.config)
        out = str(Path(opts.out).resolve()) if opts.out else None
        cfg = with_overrides(
            cfg, out=out, seed=opts.seed, theta=opts.theta, alpha=opts.alpha, max_iterations=opts.max_iterations,
            top_n=opts.top_n, embedder=opts.embedder, stub_judges=opts.stub_judges,
            stub_reranker=opts.stub_reranker, parallelism=opts.parallelism,
        )
        run = COMMANDS[opts.command](cfg, opts)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for stage, info in run.stages.items():
        counts = ", ".join(f"{k}={v}" for k, v in info.items() if not isinstance(v, list))
        print(f"{stage}: {counts}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
