"""Stage orchestration, run manifests and config loading."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from . import __version__
from .engine import RuleEngine, SemgrepEngine
from .evaluation import Approach, load_bench, run_benchmark
from .forge import build_rule_set, verify_library
from .miner import DEFAULT_KEYWORDS, load_corpus, load_keywords, mine, read_commits, write_commits
from .model import AblationMode, PipelineConfig, StrategySummary
from .optimizer import aggregate_and_rank, optimize_target, resolver_for_sources, scan_library
from .perf import identify_hotspots, load_profile, load_reports, combine
from .providers import CompletionProvider, Embedder, make_embedder, make_provider
from .store import atomic_write_text, dumps_json, library_store_read, library_store_write
from .strategy import cluster_summaries, prune_clusters, summarize_all

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
STAGES = ("mine", "summarize", "cluster", "rules", "scan", "optimize", "eval", "perf")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    pass


class MissingInput(StageError):
    pass


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return PipelineConfig.from_dict(data)


def sha256_path(path: Path) -> str:
    """Content hash of a file, or of a directory tree (manifests excluded)."""
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    if not path.is_dir():
        raise MissingInput(str(path))
    for sub in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST):
        h.update(sub.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(sub.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc)
    )
    return moment.replace(microsecond=0).isoformat()


@dataclass
class Context:
    """Everything a stage may need; providers are created lazily."""

    config: PipelineConfig
    workdir: Path
    corpus: Path | None = None
    target: Path | None = None
    bench: Path | None = None
    kb: Path | None = None
    profile: Path | None = None
    reports: Path | None = None
    keywords_file: Path | None = None
    replay: Path | None = None
    llm_verify: bool = True
    mode: AblationMode = AblationMode.FULL
    approach: Approach = Approach.STRATEGY_LIB
    degraded: bool = False
    provider: CompletionProvider | None = None
    embedder: Embedder | None = None
    engine: RuleEngine | None = None
    force: bool = False

    def get_provider(self) -> CompletionProvider:
        if self.provider is None:
            self.provider = make_provider(self.config, self.replay)
        return self.provider

    def get_embedder(self) -> Embedder:
        if self.embedder is None:
            replay = self.replay if self.replay and _has_section(self.replay, "embeddings") else None
            self.embedder = make_embedder(self.config.embedder, self.config.embedding_dim, replay)
        return self.embedder

    def get_engine(self) -> RuleEngine:
        if self.engine is None:
            self.engine = SemgrepEngine(self.config.engine_path, self.config.engine_timeout)
        return self.engine

    def stage_dir(self, stage: str) -> Path:
        return self.workdir / stage


def _has_section(path: Path, key: str) -> bool:
    try:
        return key in json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False


@dataclass
class Stage:
    name: str
    inputs: Callable[[Context], dict[str, tuple[Path, str]]]
    run: Callable[[Context, Path], dict[str, Any]]
    identities: Callable[[Context], dict[str, str]] = field(default=lambda ctx: {})


def _require(ctx: Context, attr: str, flag: str) -> Path:
    value = getattr(ctx, attr)
    if value is None:
        raise MissingInput(f"missing input: pass {flag}")
    return Path(value)


def _out(ctx: Context, stage: str, rel: str) -> tuple[Path, str]:
    return ctx.stage_dir(stage) / rel, stage


# ---- stage bodies -------------------------------------------------------


def _run_mine(ctx: Context, out: Path) -> dict[str, Any]:
    keywords = load_keywords(ctx.keywords_file) if ctx.keywords_file else list(ctx.config.keywords or DEFAULT_KEYWORDS)
    provider = ctx.get_provider() if ctx.llm_verify else None
    result = mine(load_corpus(ctx.corpus), provider, keywords, ctx.config.workers)
    write_commits(out / "commits.jsonl", result.commits)
    atomic_write_text(out / "stats.json", dumps_json(result.summary()))
    return {"kept": len(result.commits)}


def _run_summarize(ctx: Context, out: Path) -> dict[str, Any]:
    commits = read_commits(ctx.stage_dir("mine") / "commits.jsonl")
    batch = summarize_all(commits, ctx.get_provider(), ctx.get_embedder(), ctx.config.m_summaries, ctx.config.workers)
    write_summaries(out / "summaries.jsonl", batch.summaries)
    atomic_write_text(out / "unsummarized.json", dumps_json(batch.unsummarized))
    return {"summarized": len(batch.summaries), "unsummarized": len(batch.unsummarized)}


def write_summaries(path: Path, summaries: list[StrategySummary]) -> None:
    atomic_write_text(path, "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in summaries))


def read_summaries(path: Path) -> list[StrategySummary]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [StrategySummary.from_dict(json.loads(line)) for line in lines if line.strip()]


def cluster_into_library(
    summaries: list[StrategySummary],
    commits_path: Path,
    library_dir: Path,
    config: PipelineConfig,
    embedder_id: str,
) -> dict[str, Any]:
    dims = {len(s.embedding) for s in summaries}
    if len(dims) > 1:
        raise StageError(f"summaries mix embedding dimensions {sorted(dims)}")
    clusters, noise = cluster_summaries(summaries, config.eps_sim, config.min_pts)
    kept = prune_clusters(clusters, config.min_cluster_size, summaries)
    members = {h for c in kept for h in c.member_hashes}
    commits = [c for c in read_commits(commits_path) if c.commit_hash in members]
    library_store_write(
        library_dir,
        kept,
        [],
        commits=commits,
        config=config,
        embedder_id=embedder_id,
        embedding_dim=dims.pop() if dims else 0,
    )
    kept_ids = {c.cluster_id for c in kept}
    pruned = [h for c in clusters if c.cluster_id not in kept_ids for h in c.member_hashes]
    return {"clusters": len(kept), "noise": sorted(noise), "pruned": sorted(pruned)}


def _run_cluster(ctx: Context, out: Path) -> dict[str, Any]:
    summaries = read_summaries(ctx.stage_dir("summarize") / "summaries.jsonl")
    embedder_id = _manifest_field(ctx.stage_dir("summarize"), "identities", {}).get("embedder", "")
    info = cluster_into_library(summaries, ctx.stage_dir("mine") / "commits.jsonl", out / "library", ctx.config, embedder_id)
    atomic_write_text(out / "noise.json", dumps_json({"noise": info["noise"], "pruned": info["pruned"]}))
    return {"clusters": info["clusters"], "noise": len(info["noise"]), "pruned": len(info["pruned"])}


def forge_into_library(
    source_library: Path, out_library: Path, config: PipelineConfig, provider: CompletionProvider, engine: RuleEngine
) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    lib = library_store_read(source_library)
    commits = {c.commit_hash: c for c in lib.commits}
    rules, ruleless, traces = [], [], []
    runs = 0
    for cluster in lib.clusters:
        result = build_rule_set(cluster, commits, config, provider, engine)
        rules.extend(result.rules)
        runs += result.engine_runs
        if result.ruleless:
            ruleless.append(cluster.cluster_id)
        for t in result.traces:
            traces.append(
                {
                    "cluster_id": cluster.cluster_id,
                    "commit_hash": t.commit_hash,
                    "attempt_index": t.attempt_index,
                    "outcome": t.outcome.value,
                    "iterations_used": t.iterations_used,
                    "engine_runs": t.engine_runs,
                    "engine_errors": t.engine_errors,
                    "detail": t.detail,
                }
            )
    library_store_write(
        out_library,
        lib.clusters,
        rules,
        commits=lib.commits,
        config=config,
        embedder_id=lib.embedder_id,
        embedding_dim=lib.embedding_dim,
        ruleless=ruleless,
    )
    return {"rules": len(rules), "ruleless": len(ruleless), "engine_runs": runs}, traces


def _run_rules(ctx: Context, out: Path) -> dict[str, Any]:
    info, traces = forge_into_library(
        ctx.stage_dir("cluster") / "library", out / "library", ctx.config, ctx.get_provider(), ctx.get_engine()
    )
    atomic_write_text(out / "traces.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces))
    return info


def scan_report(target: Path, library_dir: Path, config: PipelineConfig, engine: RuleEngine) -> dict[str, Any]:
    lib = library_store_read(library_dir)
    hits = scan_library(target, lib, engine)
    files = {h.file_path for h in hits}
    sources = {
        rel: ((target / rel) if target.is_dir() else target).read_text(encoding="utf-8", errors="replace")
        for rel in files
    }
    ranked = aggregate_and_rank(hits, config.top_k_locations, resolver_for_sources(sources))
    strategies = {c.cluster_id: c.strategy_text for c in lib.clusters}
    return {
        "hits": [h.__dict__ for h in hits],
        "ranked": [{**loc.__dict__, "rule_ids": list(loc.rule_ids), "strategy_text": strategies.get(loc.cluster_id, "")} for loc in ranked],
    }


def _run_scan(ctx: Context, out: Path) -> dict[str, Any]:
    target = _require(ctx, "target", "--target")
    report = scan_report(target, ctx.stage_dir("rules") / "library", ctx.config, ctx.get_engine())
    atomic_write_text(out / "scan.json", dumps_json(report))
    return {"hits": len(report["hits"]), "locations": len(report["ranked"])}


def write_candidates(out: Path, outcome) -> None:
    for idx, cand in enumerate(outcome.candidates):
        stem = f"candidate-{idx:03d}"
        atomic_write_text(out / f"{stem}.json", dumps_json(cand.to_dict()))
        atomic_write_text(out / f"{stem}.diff", cand.file_diff or cand.diff)
    atomic_write_text(
        out / "failures.json",
        dumps_json([{**loc.__dict__, "rule_ids": list(loc.rule_ids), "reason": why} for loc, why in outcome.failures]),
    )


def _run_optimize(ctx: Context, out: Path) -> dict[str, Any]:
    target = _require(ctx, "target", "--target")
    lib = library_store_read(ctx.stage_dir("rules") / "library")
    outcome = optimize_target(target, lib, ctx.get_provider(), ctx.get_engine(), ctx.config.top_k_locations, ctx.mode)
    write_candidates(out, outcome)
    return {"candidates": len(outcome.candidates), "failures": len(outcome.failures)}


def _run_eval(ctx: Context, out: Path) -> dict[str, Any]:
    bench = load_bench(_require(ctx, "bench", "--bench"))
    library = engine = None
    kb = []
    if ctx.approach in (Approach.STRATEGY_LIB, Approach.STRATEGY_LIB_DEGRADED):
        library = library_store_read(ctx.stage_dir("rules") / "library")
        engine = ctx.get_engine()
    if ctx.approach is Approach.RAG:
        kb = read_commits(_require(ctx, "kb", "--kb"))
    report = run_benchmark(
        bench,
        ctx.approach,
        ctx.get_provider(),
        repeats=ctx.config.repeats,
        degraded=ctx.degraded,
        library=library,
        knowledge_base=kb,
        engine=engine,
        config=ctx.config,
        mode=ctx.mode,
    )
    report.write(out, bench)
    return {"em_per_repeat": report.em_counts(), "em_solved_any": report.solved_any}


def _run_perf(ctx: Context, out: Path) -> dict[str, Any]:
    info: dict[str, Any] = {}
    if ctx.profile is None and ctx.reports is None:
        raise MissingInput("missing input: pass --profile and/or --reports for the perf stage")
    if ctx.profile is not None:
        hot = identify_hotspots(load_profile(ctx.profile), ctx.config.hotspot_threshold)
        atomic_write_text(out / "hotspots.json", dumps_json(hot))
        info["hotspots"] = len(hot)
    if ctx.reports is not None:
        selection = combine(load_reports(ctx.reports))
        atomic_write_text(out / "selection.json", dumps_json(selection))
        info["functions"] = len(selection)
    return info


def _ext(ctx: Context, attr: str, flag: str, name: str) -> dict[str, tuple[Path, str]]:
    return {name: (_require(ctx, attr, flag), "")}


def _llm(ctx: Context) -> dict[str, str]:
    return {"provider": ctx.get_provider().identity}


def _lib_stage_inputs(ctx: Context) -> dict[str, tuple[Path, str]]:
    return {"library": _out(ctx, "rules", "library"), **_ext(ctx, "target", "--target", "target")}


def _eval_inputs(ctx: Context) -> dict[str, tuple[Path, str]]:
    inputs = _ext(ctx, "bench", "--bench", "bench")
    if ctx.approach in (Approach.STRATEGY_LIB, Approach.STRATEGY_LIB_DEGRADED):
        inputs["library"] = _out(ctx, "rules", "library")
    if ctx.approach is Approach.RAG:
        inputs.update(_ext(ctx, "kb", "--kb", "kb"))
    return inputs


def _perf_inputs(ctx: Context) -> dict[str, tuple[Path, str]]:
    inputs = {}
    if ctx.profile is not None:
        inputs["profile"] = (ctx.profile, "")
    if ctx.reports is not None:
        inputs["reports"] = (ctx.reports, "")
    return inputs


STAGE_TABLE: dict[str, Stage] = {
    "mine": Stage(
        "mine",
        lambda ctx: {
            **_ext(ctx, "corpus", "--corpus", "corpus"),
            **({"keywords": (ctx.keywords_file, "")} if ctx.keywords_file else {}),
        },
        _run_mine,
        lambda ctx: {**(_llm(ctx) if ctx.llm_verify else {}), "llm_verify": str(ctx.llm_verify)},
    ),
    "summarize": Stage(
        "summarize",
        lambda ctx: {"commits": _out(ctx, "mine", "commits.jsonl")},
        _run_summarize,
        lambda ctx: {**_llm(ctx), "embedder": ctx.get_embedder().identity},
    ),
    "cluster": Stage(
        "cluster",
        lambda ctx: {"summaries": _out(ctx, "summarize", "summaries.jsonl"), "commits": _out(ctx, "mine", "commits.jsonl")},
        _run_cluster,
    ),
    "rules": Stage(
        "rules",
        lambda ctx: {"library": _out(ctx, "cluster", "library")},
        _run_rules,
        lambda ctx: {**_llm(ctx), "engine": ctx.get_engine().identity},
    ),
    "scan": Stage("scan", _lib_stage_inputs, _run_scan, lambda ctx: {"engine": ctx.get_engine().identity}),
    "optimize": Stage(
        "optimize",
        _lib_stage_inputs,
        _run_optimize,
        lambda ctx: {**_llm(ctx), "engine": ctx.get_engine().identity, "mode": ctx.mode.value},
    ),
    "eval": Stage(
        "eval",
        _eval_inputs,
        _run_eval,
        lambda ctx: {**_llm(ctx), "approach": ctx.approach.value, "degraded": str(ctx.degraded), "mode": ctx.mode.value},
    ),
    "perf": Stage("perf", _perf_inputs, _run_perf),
}


def _manifest_field(stage_dir: Path, key: str, default: Any) -> Any:
    path = stage_dir / MANIFEST
    if not path.is_file():
        return default
    return json.loads(path.read_text(encoding="utf-8")).get(key, default)


def _resolve_inputs(ctx: Context, stage: Stage) -> dict[str, str]:
    hashes = {}
    for name, (path, producer) in stage.inputs(ctx).items():
        if not path.exists():
            if producer:
                raise MissingInput(f"stage {stage.name!r} needs {path}; run stage {producer!r} first")
            raise MissingInput(f"stage {stage.name!r}: input {name} not found at {path}")
        hashes[name] = sha256_path(path)
    return hashes


def write_manifest(out: Path, stage: str, config: PipelineConfig, inputs: dict[str, str], identities: dict[str, str], result: dict[str, Any], started: str) -> None:
    manifest = {
        "stage": stage,
        "tool_version": __version__,
        "config": config.to_dict(),
        "seed": config.seed,
        "inputs": inputs,
        "identities": identities,
        "result": result,
        "outputs": sha256_path(out),
        "started_at": started,
        "finished_at": timestamp(),
    }
    atomic_write_text(out / MANIFEST, dumps_json(manifest))


def _up_to_date(out: Path, config: PipelineConfig, inputs: dict[str, str], identities: dict[str, str]) -> bool:
    path = out / MANIFEST
    if not path.is_file():
        return False
    old = json.loads(path.read_text(encoding="utf-8"))
    return (
        old.get("inputs") == inputs
        and old.get("config") == config.to_dict()
        and old.get("identities") == identities
        and old.get("outputs") == sha256_path(out)
    )


def run_stage(ctx: Context, name: str) -> str:
    """Run one stage into a staging directory and swap it in on success.

    Returns ``"ran"`` or ``"skipped"``.
    """
    stage = STAGE_TABLE[name]
    inputs = _resolve_inputs(ctx, stage)
    identities = stage.identities(ctx)
    out = ctx.stage_dir(name)
    if not ctx.force and _up_to_date(out, ctx.config, inputs, identities):
        log.info("stage %s: inputs unchanged, skipping", name)
        return "skipped"
    staging = ctx.workdir / f".{name}.staging"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    started = timestamp()
    try:
        result = stage.run(ctx, staging)
        write_manifest(staging, name, ctx.config, inputs, identities, result, started)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    staging.rename(out)
    log.info("stage %s: %s", name, result)
    return "ran"


def run_pipeline(stages: list[str], ctx: Context) -> int:
    """Run ``stages`` in canonical order; stop at the first failure with exit status 1."""
    unknown = [s for s in stages if s not in STAGE_TABLE]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    for name in [s for s in STAGES if s in stages]:
        try:
            run_stage(ctx, name)
        except MissingInput as exc:
            log.error("%s", exc)
            return 2
        except Exception as exc:
            log.error("stage %s failed: %s", name, exc)
            return 1
    return 0


def verify_report(library_dir: Path, engine: RuleEngine) -> list[dict[str, Any]]:
    return [r.__dict__ for r in verify_library(library_store_read(library_dir), engine)]
