"""Command-line entry point: ``strat-forge <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .evaluation import Approach
from .model import AblationMode
from .pipeline import (
    STAGES,
    Context,
    MissingInput,
    cluster_into_library,
    forge_into_library,
    load_config,
    read_summaries,
    run_pipeline,
    scan_report,
    verify_report,
    write_candidates,
    write_manifest,
    write_summaries,
    sha256_path,
    timestamp,
)
from .store import atomic_write_text, dumps_json, library_store_read

log = logging.getLogger("strat_forge")

MODES = {"full": AblationMode.FULL, "no-location": AblationMode.NO_LOCATION, "no-strategy": AblationMode.NO_STRATEGY}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML/JSON config document")
    p.add_argument("--replay", type=Path, help="scripted responses instead of a live model")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strat-forge", description="Mine optimization strategies and apply them.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="filter a commit corpus down to single-function optimizations")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--keywords", type=Path)
    p.add_argument("--no-llm-verify", action="store_true")

    p = sub.add_parser("summarize", help="summarize each mined commit's strategy")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="mined commits.jsonl")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cluster", help="group summaries into strategy clusters")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="summaries.jsonl")
    p.add_argument("--commits", type=Path, required=True, help="mined commits.jsonl")
    p.add_argument("--library", type=Path, required=True)
    p.add_argument("--eps", type=float, help="cosine similarity threshold")
    p.add_argument("--min-pts", type=int)
    p.add_argument("--min-cluster-size", type=int)

    p = sub.add_parser("rules", help="synthesize and validate detection rules per cluster")
    p.add_argument("--library", type=Path, required=True, help="clustered library")
    p.add_argument("--out", type=Path, required=True, help="library with rules")

    p = sub.add_parser("verify", help="re-run every stored rule on its source commit")
    p.add_argument("--library", type=Path, required=True)

    p = sub.add_parser("scan", help="report ranked optimization locations")
    p.add_argument("--library", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("optimize", help="generate patches for ranked locations")
    p.add_argument("--library", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="full")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="exact-match benchmark")
    p.add_argument("--bench", type=Path, required=True)
    p.add_argument("--approach", required=True, help="Direct, RAG, StrategyLib or StrategyLibDegraded")
    p.add_argument("--library", type=Path)
    p.add_argument("--kb", type=Path, help="knowledge base commits.jsonl for RAG")
    p.add_argument("--degraded", action="store_true")
    p.add_argument("--repeats", type=int)
    p.add_argument("--mode", choices=sorted(MODES), default="full")
    p.add_argument("--out", type=Path, required=True)

    perf = sub.add_parser("perf", help="hotspots, measurement and variant selection")
    perf_sub = perf.add_subparsers(dest="perf_command", required=True)
    q = perf_sub.add_parser("hotspots")
    q.add_argument("--profile", type=Path, required=True)
    q.add_argument("--threshold", type=float)
    q = perf_sub.add_parser("run")
    q.add_argument("--manifest", type=Path, required=True)
    q.add_argument("--baseline", type=Path, required=True)
    q.add_argument("--variant", type=Path, required=True)
    q.add_argument("--function", required=True)
    q.add_argument("--variant-id", required=True)
    q.add_argument("--runs", type=int)
    q.add_argument("--out", type=Path, required=True)
    q = perf_sub.add_parser("combine")
    q.add_argument("--reports", type=Path, required=True)
    for q in perf_sub.choices.values():
        _common(q)

    p = sub.add_parser("run", help="run a chain of stages under one work directory")
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--stages", default=",".join(STAGES[:4]), help="comma-separated, default mine..rules")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--keywords", type=Path)
    p.add_argument("--no-llm-verify", action="store_true")
    p.add_argument("--target", type=Path)
    p.add_argument("--bench", type=Path)
    p.add_argument("--kb", type=Path)
    p.add_argument("--approach", default="StrategyLib")
    p.add_argument("--degraded", action="store_true")
    p.add_argument("--mode", choices=sorted(MODES), default="full")
    p.add_argument("--profile", type=Path)
    p.add_argument("--reports", type=Path)
    p.add_argument("--force", action="store_true", help="rerun stages whose inputs are unchanged")

    for name, p in sub.choices.items():
        if name != "perf":
            _common(p)
    return parser


def _config(args: argparse.Namespace, **extra):
    overrides = {"seed": args.seed, "workers": args.workers, **extra}
    return load_config(args.config, overrides)


def _context(args: argparse.Namespace, config, workdir: Path) -> Context:
    return Context(config=config, workdir=workdir, replay=args.replay)


def _manifest(out: Path, stage: str, config, inputs: dict[str, Path], result: dict, identities: dict, started: str) -> None:
    hashes = {k: sha256_path(v) for k, v in inputs.items()}
    write_manifest(out, stage, config, hashes, identities, result, started)


def _cmd_mine(args, config) -> int:
    ctx = _context(args, config, args.out.parent)
    ctx.corpus, ctx.keywords_file, ctx.llm_verify = args.corpus, args.keywords, not args.no_llm_verify
    from .pipeline import STAGE_TABLE

    started = timestamp()
    args.out.mkdir(parents=True, exist_ok=True)
    result = STAGE_TABLE["mine"].run(ctx, args.out)
    _manifest(args.out, "mine", config, {"corpus": args.corpus}, result, STAGE_TABLE["mine"].identities(ctx), started)
    print(json.dumps(result))
    return 0


def _cmd_summarize(args, config) -> int:
    from .miner import read_commits
    from .strategy import summarize_all

    ctx = _context(args, config, args.out)
    started = timestamp()
    source = args.inp / "commits.jsonl" if args.inp.is_dir() else args.inp
    batch = summarize_all(read_commits(source), ctx.get_provider(), ctx.get_embedder(), config.m_summaries, config.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    write_summaries(args.out / "summaries.jsonl", batch.summaries)
    atomic_write_text(args.out / "unsummarized.json", dumps_json(batch.unsummarized))
    result = {"summarized": len(batch.summaries), "unsummarized": len(batch.unsummarized)}
    identities = {"provider": ctx.get_provider().identity, "embedder": ctx.get_embedder().identity}
    _manifest(args.out, "summarize", config, {"commits": source}, result, identities, started)
    print(json.dumps(result))
    return 0


def _cmd_cluster(args, config) -> int:
    started = timestamp()
    source = args.inp / "summaries.jsonl" if args.inp.is_dir() else args.inp
    embedder_id = ""
    manifest = source.parent / "manifest.json"
    if manifest.is_file():
        embedder_id = json.loads(manifest.read_text(encoding="utf-8")).get("identities", {}).get("embedder", "")
    info = cluster_into_library(read_summaries(source), args.commits, args.library, config, embedder_id)
    _manifest(args.library, "cluster", config, {"summaries": source, "commits": args.commits}, {"clusters": info["clusters"]}, {}, started)
    print(json.dumps({k: (len(v) if isinstance(v, list) else v) for k, v in info.items()}))
    return 0


def _cmd_rules(args, config) -> int:
    ctx = _context(args, config, args.out)
    started = timestamp()
    info, traces = forge_into_library(args.library, args.out, config, ctx.get_provider(), ctx.get_engine())
    atomic_write_text(args.out / "traces.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces))
    identities = {"provider": ctx.get_provider().identity, "engine": ctx.get_engine().identity}
    _manifest(args.out, "rules", config, {"library": args.library}, info, identities, started)
    print(json.dumps(info))
    return 0


def _cmd_verify(args, config) -> int:
    ctx = _context(args, config, args.library)
    reports = verify_report(args.library, ctx.get_engine())
    failed = [r for r in reports if not r["ok"]]
    for r in reports:
        print(f"{'ok  ' if r['ok'] else 'FAIL'} {r['rule_id']} findings={r['findings']} {r['message']}".rstrip())
    print(f"{len(reports) - len(failed)}/{len(reports)} rules re-validated")
    return 1 if failed else 0


def _cmd_scan(args, config) -> int:
    ctx = _context(args, config, args.library)
    report = scan_report(args.target, args.library, config, ctx.get_engine())
    if args.json:
        print(dumps_json(report))
        return 0
    for loc in report["ranked"]:
        print(f"{loc['file_path']}:{loc['start_line']}-{loc['end_line']} hits={loc['hit_count']} cluster={loc['cluster_id']}")
    return 0


def _cmd_optimize(args, config) -> int:
    from .optimizer import optimize_target

    ctx = _context(args, config, args.out)
    started = timestamp()
    outcome = optimize_target(
        args.target, library_store_read(args.library), ctx.get_provider(), ctx.get_engine(), config.top_k_locations, MODES[args.mode]
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_candidates(args.out, outcome)
    result = {"candidates": len(outcome.candidates), "failures": len(outcome.failures)}
    identities = {"provider": ctx.get_provider().identity, "engine": ctx.get_engine().identity, "mode": args.mode}
    _manifest(args.out, "optimize", config, {"library": args.library, "target": args.target}, result, identities, started)
    print(json.dumps(result))
    return 0


def _cmd_eval(args, config) -> int:
    from .evaluation import load_bench, run_benchmark
    from .miner import read_commits

    ctx = _context(args, config, args.out)
    approach = Approach.parse(args.approach)
    degraded = args.degraded or approach is Approach.STRATEGY_LIB_DEGRADED
    uses_library = approach in (Approach.STRATEGY_LIB, Approach.STRATEGY_LIB_DEGRADED)
    if uses_library and args.library is None:
        raise MissingInput(f"approach {approach.value} needs --library")
    if approach is Approach.RAG and args.kb is None:
        raise MissingInput("approach RAG needs --kb")
    started = timestamp()
    bench = load_bench(args.bench)
    report = run_benchmark(
        bench,
        approach,
        ctx.get_provider(),
        repeats=config.repeats,
        degraded=degraded,
        library=library_store_read(args.library) if uses_library else None,
        knowledge_base=read_commits(args.kb) if approach is Approach.RAG else [],
        engine=ctx.get_engine() if uses_library else None,
        config=config,
        mode=MODES[args.mode],
    )
    report.write(args.out, bench)
    inputs = {"bench": args.bench}
    if uses_library:
        inputs["library"] = args.library
    if approach is Approach.RAG:
        inputs["kb"] = args.kb
    result = {"em_per_repeat": report.em_counts(), "em_solved_any": report.solved_any}
    identities = {"provider": ctx.get_provider().identity, "approach": approach.value, "degraded": str(degraded)}
    _manifest(args.out, "eval", config, inputs, result, identities, started)
    print(json.dumps(result))
    return 0


def _cmd_perf(args, config) -> int:
    from . import perf

    if args.perf_command == "hotspots":
        threshold = config.hotspot_threshold if args.threshold is None else args.threshold
        for name in perf.identify_hotspots(perf.load_profile(args.profile), threshold):
            print(name)
        return 0
    if args.perf_command == "run":
        manifest = perf.ProjectManifest.load(args.manifest)
        runs = args.runs or config.perf_runs
        report, raw = perf.run_variant(manifest, args.baseline, args.variant, args.function, args.variant_id, runs)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(args.out, dumps_json({**report.to_dict(), "raw": raw}))
        print(json.dumps({"effective": report.effective, "total_score": report.total_score}))
        return 0
    print(dumps_json(perf.combine(perf.load_reports(args.reports))))
    return 0


def _cmd_run(args, config) -> int:
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    ctx = Context(
        config=config,
        workdir=args.workdir,
        corpus=args.corpus,
        target=args.target,
        bench=args.bench,
        kb=args.kb,
        profile=args.profile,
        reports=args.reports,
        keywords_file=args.keywords,
        replay=args.replay,
        llm_verify=not args.no_llm_verify,
        mode=MODES[args.mode],
        approach=Approach.parse(args.approach),
        degraded=args.degraded,
        force=args.force,
    )
    return run_pipeline(stages, ctx)


COMMANDS = {
    "mine": _cmd_mine,
    "summarize": _cmd_summarize,
    "cluster": _cmd_cluster,
    "rules": _cmd_rules,
    "verify": _cmd_verify,
    "scan": _cmd_scan,
    "optimize": _cmd_optimize,
    "eval": _cmd_eval,
    "perf": _cmd_perf,
    "run": _cmd_run,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    extra = {}
    if args.command == "cluster":
        extra = {"eps_sim": args.eps, "min_pts": args.min_pts, "min_cluster_size": args.min_cluster_size}
    if args.command == "eval":
        extra = {"repeats": args.repeats}
    try:
        config = _config(args, **extra)
        return COMMANDS[args.command](args, config)
    except MissingInput as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface a clean message and status
        if args.verbose:
            raise
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
