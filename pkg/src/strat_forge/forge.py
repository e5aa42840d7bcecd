"""Synthesize Semgrep rules per strategy cluster with an understand/generate/repair loop."""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import yaml

from . import prompts
from .engine import EngineUnavailable, RuleEngine, run_rule_on_code
from .model import (
    AnalysisRule,
    AttemptOutcome,
    CommitRecord,
    PipelineConfig,
    RuleStatus,
    StrategyCluster,
)
from .providers import CompletionProvider
from .store import META_KEY, Library

log = logging.getLogger(__name__)

ZERO_FINDINGS = "rule produced zero findings on the known-optimizable code"
NO_RULE_BLOCK = "no rule block: respond with exactly one ```yaml fenced block holding the rule"
MULTIPLE_RULE_BLOCKS = "multiple rule blocks: respond with exactly one ```yaml fenced block"


class AttemptAborted(RuntimeError):
    pass


class CandidateError(ValueError):
    pass


@dataclass
class AttemptTrace:
    commit_hash: str
    attempt_index: int
    transcript: list[tuple[str, str]] = field(default_factory=list)
    engine_errors: list[str] = field(default_factory=list)
    outcome: AttemptOutcome = AttemptOutcome.EXHAUSTED
    rule_yaml: str | None = None
    iterations_used: int = 0
    engine_runs: int = 0
    detail: str = ""


def rule_id_for(cluster_id: str, commit_hash: str, attempt_index: int) -> str:
    return f"{cluster_id}-{commit_hash[:10]}-a{attempt_index}"


def sample_commits(
    cluster: StrategyCluster, n: int, seed: int, commits: Mapping[str, CommitRecord]
) -> list[CommitRecord]:
    """Up to ``n`` distinct members via a seeded shuffle of the hash-sorted member list."""
    if n < 1:
        raise ValueError("n must be >= 1")
    members = sorted(set(cluster.member_hashes))
    rng = random.Random(f"{seed}:{cluster.cluster_id}")
    rng.shuffle(members)
    return [commits[h] for h in members[: min(n, len(members))]]


def phase_understand(
    commit: CommitRecord, provider: CompletionProvider, sample: int = 0, transcript: list | None = None
) -> str:
    prompt = prompts.understand_prompt(commit)
    try:
        response = provider.complete(prompt, sample=sample)
    except Exception as exc:
        raise AttemptAborted(f"provider failed during analysis: {exc}") from exc
    if transcript is not None:
        transcript.append((prompt, response))
    analysis, removed = prompts.strip_yaml_blocks(response)
    if removed:
        log.warning("analysis for %s contained %d YAML block(s); stripped", commit.commit_hash, removed)
    analysis = analysis.strip()
    if not analysis:
        raise AttemptAborted("provider returned an empty analysis")
    return analysis


def extract_rule(response: str, rule_id: str) -> str:
    """Pull the single rule block out of ``response`` and force its id to ``rule_id``.

    Unparseable YAML is returned verbatim so the engine reports the syntax error.
    """
    blocks = [
        body
        for tag, body in prompts.fenced_blocks(response)
        if tag in prompts.YAML_TAGS or (not tag and body.lstrip().startswith("rules:"))
    ]
    if not blocks:
        raise CandidateError(NO_RULE_BLOCK)
    if len(blocks) > 1:
        raise CandidateError(MULTIPLE_RULE_BLOCKS)
    text = blocks[0]
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if not isinstance(doc, dict) or not isinstance(doc.get("rules"), list):
        raise CandidateError("rule block must be a mapping with a top-level 'rules' list")
    if len(doc["rules"]) != 1 or not isinstance(doc["rules"][0], dict):
        raise CandidateError(f"expected exactly one rule definition, found {len(doc['rules'])}")
    doc["rules"][0]["id"] = rule_id
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


def phase_generate(
    analysis: str,
    commit: CommitRecord,
    provider: CompletionProvider,
    rule_id: str,
    sample: int = 0,
    transcript: list | None = None,
) -> str:
    if not analysis.strip():
        raise ValueError("analysis text must be non-empty")
    prompt = prompts.generate_prompt(analysis, commit, rule_id)
    try:
        response = provider.complete(prompt, sample=sample)
    except Exception as exc:
        raise AttemptAborted(f"provider failed during generation: {exc}") from exc
    if transcript is not None:
        transcript.append((prompt, response))
    return extract_rule(response, rule_id)


def validate_and_repair(
    candidate: str | None,
    commit: CommitRecord,
    provider: CompletionProvider,
    max_iterations: int,
    engine: RuleEngine,
    rule_id: str,
    *,
    sample: int = 0,
    trace: AttemptTrace | None = None,
    candidate_error: str | None = None,
) -> AttemptTrace:
    """Run the engine on the pre-commit code and feed failures back for repair.

    ``candidate=None`` means generation produced no usable block; that counts
    as a failed iteration with ``candidate_error`` as feedback. Each iteration
    runs the engine at most once.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    trace = trace or AttemptTrace(commit.commit_hash, sample + 1)
    last_text = candidate or ""
    for iteration in range(1, max_iterations + 1):
        trace.iterations_used = iteration
        if candidate is None:
            error = candidate_error or NO_RULE_BLOCK
        else:
            try:
                result = run_rule_on_code(engine, candidate, commit.code_before, commit.language)
            except EngineUnavailable as exc:
                trace.outcome = AttemptOutcome.ENGINE_UNAVAILABLE
                trace.detail = str(exc)
                return trace
            trace.engine_runs += 1
            if result.ok and result.findings:
                trace.outcome = AttemptOutcome.VALIDATED
                trace.rule_yaml = candidate
                return trace
            error = result.error_text() if not result.ok else ZERO_FINDINGS
            last_text = candidate
        trace.engine_errors.append(error)
        if iteration == max_iterations:
            break
        prompt = prompts.repair_prompt(last_text or "(no rule produced)", error, commit, rule_id)
        try:
            response = provider.complete(prompt, sample=sample)
        except Exception as exc:
            trace.outcome = AttemptOutcome.ABORTED
            trace.detail = f"provider failed during repair: {exc}"
            return trace
        trace.transcript.append((prompt, response))
        try:
            candidate, candidate_error = extract_rule(response, rule_id), None
        except CandidateError as exc:
            candidate, candidate_error = None, str(exc)
    trace.outcome = AttemptOutcome.EXHAUSTED
    return trace


def run_attempt(
    commit: CommitRecord,
    attempt_index: int,
    cluster_id: str,
    provider: CompletionProvider,
    engine: RuleEngine,
    max_iterations: int,
) -> AttemptTrace:
    """One independent attempt: fresh transcript, own analysis, own repair loop."""
    sample = attempt_index - 1
    rule_id = rule_id_for(cluster_id, commit.commit_hash, attempt_index)
    trace = AttemptTrace(commit.commit_hash, attempt_index)
    try:
        analysis = phase_understand(commit, provider, sample, trace.transcript)
    except AttemptAborted as exc:
        trace.outcome = AttemptOutcome.ABORTED
        trace.detail = str(exc)
        return trace
    candidate, candidate_error = None, None
    try:
        candidate = phase_generate(analysis, commit, provider, rule_id, sample, trace.transcript)
    except CandidateError as exc:
        candidate_error = str(exc)
    except AttemptAborted as exc:
        trace.outcome = AttemptOutcome.ABORTED
        trace.detail = str(exc)
        return trace
    return validate_and_repair(
        candidate,
        commit,
        provider,
        max_iterations,
        engine,
        rule_id,
        sample=sample,
        trace=trace,
        candidate_error=candidate_error,
    )


def attach_provenance(rule_yaml: str, rule: AnalysisRule) -> str:
    doc = yaml.safe_load(rule_yaml)
    body = doc["rules"][0]
    meta = body.get("metadata")
    if not isinstance(meta, dict):
        meta = {}
    meta[META_KEY] = {
        "cluster_id": rule.cluster_id,
        "source_commit": rule.source_commit,
        "source_repo": rule.source_repo,
        "attempt_index": rule.attempt_index,
        "iterations_used": rule.iterations_used,
        "status": rule.status.value,
    }
    body["metadata"] = meta
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


def normalize_rule(rule_yaml: str) -> str:
    """Canonical form used for dedup: id and provenance removed, keys sorted."""
    doc = yaml.safe_load(rule_yaml)
    body = dict(doc["rules"][0])
    body.pop("id", None)
    meta = dict(body.get("metadata") or {})
    meta.pop(META_KEY, None)
    if meta:
        body["metadata"] = meta
    else:
        body.pop("metadata", None)
    return json.dumps({**doc, "rules": [body]}, sort_keys=True)


@dataclass
class ForgeResult:
    cluster_id: str
    rules: list[AnalysisRule]
    traces: list[AttemptTrace]

    @property
    def engine_runs(self) -> int:
        return sum(t.engine_runs for t in self.traces)

    @property
    def ruleless(self) -> bool:
        return not self.rules


def build_rule_set(
    cluster: StrategyCluster,
    commits: Mapping[str, CommitRecord],
    config: PipelineConfig,
    provider: CompletionProvider,
    engine: RuleEngine,
) -> ForgeResult:
    """All validated, deduplicated rules for one cluster."""
    if cluster.size == 0:
        raise ValueError("cluster has no members")
    sampled = sample_commits(cluster, config.n_sample_commits, config.seed, commits)
    jobs = [(c, a) for c in sorted(sampled, key=lambda c: c.commit_hash) for a in range(1, config.n_attempts + 1)]

    def work(job: tuple[CommitRecord, int]) -> AttemptTrace:
        commit, attempt = job
        return run_attempt(commit, attempt, cluster.cluster_id, provider, engine, config.max_iterations)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            traces = list(pool.map(work, jobs))
    else:
        traces = [work(job) for job in jobs]

    rules: list[AnalysisRule] = []
    seen: set[str] = set()
    for (commit, attempt), trace in zip(jobs, traces):
        if trace.outcome is not AttemptOutcome.VALIDATED or trace.rule_yaml is None:
            continue
        key = normalize_rule(trace.rule_yaml)
        if key in seen:
            continue
        seen.add(key)
        rule = AnalysisRule(
            rule_id=rule_id_for(cluster.cluster_id, commit.commit_hash, attempt),
            cluster_id=cluster.cluster_id,
            source_commit=commit.commit_hash,
            yaml_text="",
            attempt_index=attempt,
            iterations_used=trace.iterations_used,
            status=RuleStatus.VALIDATED,
            source_repo=commit.repo_id,
        )
        rules.append(replace(rule, yaml_text=attach_provenance(trace.rule_yaml, rule)))
    if not rules:
        log.warning("cluster %s produced no validated rules", cluster.cluster_id)
    return ForgeResult(cluster.cluster_id, rules, traces)


@dataclass
class VerifyReport:
    rule_id: str
    ok: bool
    findings: int
    message: str = ""


def verify_library(lib: Library, engine: RuleEngine) -> list[VerifyReport]:
    """Re-run every validated rule on its source commit's pre-commit code."""
    reports = []
    for rule in lib.validated_rules():
        commit = lib.commit(rule.source_commit)
        if commit is None:
            reports.append(VerifyReport(rule.rule_id, False, 0, "source commit missing from library"))
            continue
        result = run_rule_on_code(engine, rule.yaml_text, commit.code_before, commit.language)
        ok = result.ok and bool(result.findings)
        message = "" if ok else (result.error_text() if not result.ok else ZERO_FINDINGS)
        reports.append(VerifyReport(rule.rule_id, ok, len(result.findings), message))
    return reports


def forge_library(
    clusters: Sequence[StrategyCluster],
    commits: Mapping[str, CommitRecord],
    config: PipelineConfig,
    provider: CompletionProvider,
    engine: RuleEngine,
) -> list[ForgeResult]:
    return [build_rule_set(c, commits, config, provider, engine) for c in clusters]
