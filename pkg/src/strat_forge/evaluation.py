"""Benchmark harness: Exact Match, BM25 retrieval baseline, leakage-aware runs."""

from __future__ import annotations

import enum
import json
import logging
import math
import re
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import cscan, prompts
from .diffs import make_unified_diff
from .engine import SOURCE_SUFFIX, RuleEngine
from .model import AblationMode, AnalysisRule, CommitRecord, Language, PipelineConfig
from .optimizer import (
    GenerationFailed,
    NoChange,
    aggregate_and_rank,
    build_prompt,
    extract_code,
    scan,
)
from .providers import CompletionProvider
from .store import Library, atomic_write_text, dumps_json

log = logging.getLogger(__name__)


def _normalize_once(code: str) -> str:
    out: list[str] = []
    i, n = 0, len(code)
    while i < n:
        c = code[i]
        if c == "/" and i + 1 < n and code[i + 1] == "/":
            while i < n and code[i] != "\n":
                i += 1
            continue
        if c == "/" and i + 1 < n and code[i + 1] == "*":
            end = code.find("*/", i + 2)
            if end < 0:
                log.warning("unterminated block comment; stripping to end of input")
                break
            i = end + 2
            continue
        if c in "\"'":
            j = i + 1
            while j < n and code[j] != c and code[j] != "\n":
                j += 2 if code[j] == "\\" else 1
            literal = code[i : min(j + 1, n)]
            out.append("".join(ch for ch in literal if not ch.isspace()))
            i = j + 1
            continue
        if not c.isspace():
            out.append(c)
        i += 1
    return "".join(out)


def normalize_code(code: str) -> str:
    """Strip ``//`` and ``/* */`` comments (literal-aware), then all whitespace.

    Removing whitespace can glue ``/ /`` or ``/ *`` into a comment opener, so
    the pass repeats until nothing changes; that keeps the result idempotent.
    """
    current = code
    while True:
        nxt = _normalize_once(current)
        if nxt == current:
            return nxt
        current = nxt


def exact_match(generated: str, ground_truth: str) -> bool:
    return normalize_code(generated) == normalize_code(ground_truth)


_WORD_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _WORD_RE.findall(text)]


class BM25:
    """Okapi BM25 with the non-negative idf variant ``log(1 + (N - df + .5) / (df + .5))``."""

    def __init__(self, documents: Sequence[str], k1: float = 1.2, b: float = 0.75):
        if not documents:
            raise ValueError("BM25 needs at least one document")
        self.k1, self.b = k1, b
        self.tfs = [Counter(tokenize(d)) for d in documents]
        self.lengths = [sum(tf.values()) for tf in self.tfs]
        self.avgdl = sum(self.lengths) / len(self.lengths) or 1.0
        df: Counter = Counter()
        for tf in self.tfs:
            df.update(tf.keys())
        n = len(documents)
        self.idf = {t: math.log(1.0 + (n - d + 0.5) / (d + 0.5)) for t, d in df.items()}

    def scores(self, query: str) -> list[float]:
        q = tokenize(query)
        out = []
        for tf, dl in zip(self.tfs, self.lengths):
            norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
            s = 0.0
            for term in q:
                f = tf.get(term)
                if f:
                    s += self.idf[term] * f * (self.k1 + 1.0) / (f + norm)
            out.append(s)
        return out


def bm25_retrieve(
    query_code: str,
    knowledge_base: Sequence[CommitRecord],
    k: int = 4,
    exclude_repo: str | None = None,
    *,
    exclude_hashes: Iterable[str] = (),
    exclude_code: Iterable[str] = (),
    k1: float = 1.2,
    b: float = 0.75,
) -> list[CommitRecord]:
    """Top-``k`` knowledge-base entries by BM25 over their pre-commit code.

    Returned in ascending score order (most similar last). Score ties go to
    the smaller commit hash, then repo id, then the earlier KB entry.
    Excluded entries are removed before scoring.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hashes = set(exclude_hashes)
    codes = {normalize_code(c) for c in exclude_code}
    pool = [
        entry
        for entry in knowledge_base
        if entry.commit_hash not in hashes
        and (exclude_repo is None or entry.repo_id != exclude_repo)
        and not (codes and normalize_code(entry.code_before) in codes)
    ]
    if not pool:
        raise ValueError("knowledge base is empty after exclusions")
    scores = BM25([e.code_before for e in pool], k1, b).scores(query_code)
    # ties resolve by content, so any permutation of the KB gives the same list
    ranked = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].commit_hash, pool[i].repo_id, i))[:k]
    return [pool[i] for i in reversed(ranked)]


@dataclass(frozen=True)
class BenchTask:
    repo_id: str
    commit_hash: str
    code_before: str
    code_after: str
    language: Language = Language.CPP

    def __post_init__(self) -> None:
        if self.code_before == self.code_after:
            raise ValueError(f"task {self.commit_hash}: code_before equals code_after")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BenchTask:
        return cls(
            repo_id=data["repo_id"],
            commit_hash=data["commit_hash"],
            code_before=data["code_before"],
            code_after=data["code_after"],
            language=Language(data.get("language", "CPP")),
        )


def load_bench(path: str | Path) -> list[BenchTask]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [BenchTask.from_dict(json.loads(line)) for line in lines if line.strip()]


class Approach(str, enum.Enum):
    DIRECT = "Direct"
    RAG = "RAG"
    STRATEGY_LIB = "StrategyLib"
    STRATEGY_LIB_DEGRADED = "StrategyLibDegraded"

    @classmethod
    def parse(cls, name: str) -> Approach:
        key = name.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key or member.name.replace("_", "").lower() == key:
                return member
        aliases = {"library": cls.STRATEGY_LIB, "lib": cls.STRATEGY_LIB}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown approach {name!r}")


@dataclass
class TaskResult:
    repo_id: str
    commit_hash: str
    em_per_repeat: list[bool] = field(default_factory=list)
    solutions: list[list[str]] = field(default_factory=list)
    retrieved: list[str] = field(default_factory=list)
    rules_used: list[dict[str, str]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def solved_any(self) -> bool:
        return any(self.em_per_repeat)

    def to_dict(self) -> dict[str, Any]:
        return {
            "repo_id": self.repo_id,
            "commit_hash": self.commit_hash,
            "em_per_repeat": self.em_per_repeat,
            "solved_any": self.solved_any,
            "solutions_per_repeat": [len(s) for s in self.solutions],
            "retrieved": self.retrieved,
            "rules_used": self.rules_used,
            "errors": self.errors,
        }


@dataclass
class Report:
    approach: Approach
    degraded: bool
    repeats: int
    tasks: list[TaskResult]
    params: dict[str, Any] = field(default_factory=dict)

    def em_counts(self) -> list[int]:
        return [sum(t.em_per_repeat[r] for t in self.tasks) for r in range(self.repeats)]

    @property
    def em_mean(self) -> float:
        counts = self.em_counts()
        return sum(counts) / len(counts) if counts else 0.0

    @property
    def solved_any(self) -> int:
        return sum(t.solved_any for t in self.tasks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "approach": self.approach.value,
            "degraded": self.degraded,
            "repeats": self.repeats,
            "n_tasks": len(self.tasks),
            "em_per_repeat": self.em_counts(),
            "em_mean": self.em_mean,
            "em_solved_any": self.solved_any,
            "params": self.params,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    def write(self, out_dir: str | Path, bench: Sequence[BenchTask]) -> None:
        """Write ``report.json`` and paired diffs under ``review/`` for manual checking."""
        root = Path(out_dir)
        atomic_write_text(root / "report.json", dumps_json(self.to_dict()))
        for task, result in zip(bench, self.tasks):
            base = root / "review" / task.commit_hash[:12]
            atomic_write_text(
                base / "ground_truth.diff", make_unified_diff(task.code_before, task.code_after, "function")
            )
            for r, solutions in enumerate(result.solutions):
                for s, code in enumerate(solutions):
                    atomic_write_text(
                        base / f"r{r}-s{s}.generated.diff",
                        make_unified_diff(task.code_before, code, "function"),
                    )


def _library_rules_for(task: BenchTask, library: Library, degraded: bool) -> list[AnalysisRule]:
    """Rules usable for ``task`` after leakage exclusion."""
    task_code = normalize_code(task.code_before)
    skip = set(library.ruleless)
    out = []
    for rule in library.validated_rules():
        if rule.cluster_id in skip or rule.source_commit == task.commit_hash:
            continue
        source = library.commit(rule.source_commit)
        if source is not None and normalize_code(source.code_before) == task_code:
            continue
        repo = rule.source_repo or (source.repo_id if source else "")
        if degraded and repo == task.repo_id:
            continue
        out.append(rule)
    return out


def _scan_task(task: BenchTask, rules: Sequence[AnalysisRule], engine: RuleEngine, top_k: int):
    with tempfile.TemporaryDirectory(prefix="strat-forge-task-") as tmp:
        target = Path(tmp) / f"task{SOURCE_SUFFIX[task.language]}"
        target.write_text(task.code_before, encoding="utf-8")
        hits = scan(target, rules, engine)
    spans = cscan.find_functions(task.code_before)

    def resolve(_path: str, line: int) -> str:
        span = cscan.function_at(spans, line)
        return span.name if span else ""

    return aggregate_and_rank(hits, top_k, resolve)


def run_benchmark(
    tasks: Sequence[BenchTask],
    approach: Approach,
    provider: CompletionProvider,
    *,
    repeats: int = 3,
    degraded: bool = False,
    library: Library | None = None,
    knowledge_base: Sequence[CommitRecord] = (),
    engine: RuleEngine | None = None,
    config: PipelineConfig | None = None,
    mode: AblationMode = AblationMode.FULL,
) -> Report:
    """Run ``approach`` over every task ``repeats`` times and score with Exact Match.

    A repeat solves a task when any of its generated solutions matches. Every
    approach excludes the task's own commit (and identical code); degraded
    runs also exclude everything from the task's repository.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    config = config or PipelineConfig()
    if approach is Approach.STRATEGY_LIB_DEGRADED:
        degraded = True
    if approach in (Approach.STRATEGY_LIB, Approach.STRATEGY_LIB_DEGRADED):
        if library is None or engine is None:
            raise ValueError("strategy-library runs need a library and a rule engine")
    if approach is Approach.RAG and not knowledge_base:
        raise ValueError("RAG runs need a knowledge base")

    strategies = {c.cluster_id: c.strategy_text for c in library.clusters} if library else {}

    def run_task(task: BenchTask) -> TaskResult:
        result = TaskResult(task.repo_id, task.commit_hash)
        prepared: list[str] = []
        try:
            if approach is Approach.DIRECT:
                prepared = [prompts.direct_prompt(task.code_before)]
            elif approach is Approach.RAG:
                examples = bm25_retrieve(
                    task.code_before,
                    knowledge_base,
                    config.rag_k,
                    task.repo_id if degraded else None,
                    exclude_hashes=[task.commit_hash],
                    exclude_code=[task.code_before],
                    k1=config.bm25_k1,
                    b=config.bm25_b,
                )
                result.retrieved = [e.commit_hash for e in examples]
                prepared = [prompts.rag_prompt(task.code_before, examples)]
            else:
                rules = _library_rules_for(task, library, degraded)
                by_id = {r.rule_id: r for r in rules}
                locations = _scan_task(task, rules, engine, config.top_k_locations)
                for loc in locations:
                    for rid in loc.rule_ids:
                        rule = by_id[rid]
                        result.rules_used.append(
                            {"rule_id": rid, "source_commit": rule.source_commit, "source_repo": rule.source_repo}
                        )
                    prepared.append(
                        build_prompt(task.code_before, loc, strategies.get(loc.cluster_id, ""), mode)
                    )
        except Exception as exc:
            log.warning("task %s failed during preparation: %s", task.commit_hash, exc)
            result.errors.append(f"prepare: {exc}")
            result.em_per_repeat = [False] * repeats
            result.solutions = [[] for _ in range(repeats)]
            return result
        for r in range(repeats):
            solutions: list[str] = []
            for prompt in prepared:
                try:
                    code = extract_code(provider.complete(prompt, sample=r))
                except (GenerationFailed, NoChange) as exc:
                    result.errors.append(f"repeat {r}: {exc}")
                    continue
                except Exception as exc:
                    log.warning("task %s repeat %d failed: %s", task.commit_hash, r, exc)
                    result.errors.append(f"repeat {r}: {exc}")
                    continue
                solutions.append(code)
            result.solutions.append(solutions)
            result.em_per_repeat.append(any(exact_match(s, task.code_after) for s in solutions))
        return result

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_task, tasks))
    else:
        results = [run_task(t) for t in tasks]
    params = {"k": config.rag_k, "bm25_k1": config.bm25_k1, "bm25_b": config.bm25_b, "top_k": config.top_k_locations}
    return Report(approach, degraded, repeats, results, params)
