"""Locate optimization opportunities with the rule library and generate rewrites."""

from __future__ import annotations

import logging
import re
import tempfile
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import cscan, prompts
from .diffs import make_unified_diff
from .engine import Finding, RuleEngine
from .model import AblationMode, AnalysisRule
from .providers import CompletionProvider
from .store import Library

log = logging.getLogger(__name__)


class GenerationFailed(RuntimeError):
    pass


class NoChange(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ScanHit:
    file_path: str
    start_line: int
    end_line: int
    rule_id: str
    cluster_id: str

    def __post_init__(self) -> None:
        if not 1 <= self.start_line <= self.end_line:
            raise ValueError(f"bad line range {self.start_line}-{self.end_line}")


@dataclass(frozen=True)
class RankedLocation:
    file_path: str
    function_name: str
    start_line: int
    end_line: int
    cluster_id: str
    hit_count: int
    rule_ids: tuple[str, ...] = ()


@dataclass
class OptimizationCandidate:
    file_path: str
    function_name: str
    start_line: int
    end_line: int
    strategy_text: str
    original_code: str
    optimized_code: str
    diff: str
    ablation_mode: AblationMode
    cluster_id: str = ""
    hit_count: int = 0
    file_diff: str = ""

    def to_dict(self) -> dict:
        data = asdict(self)
        data["ablation_mode"] = self.ablation_mode.value
        return data


def _match_rule(check_id: str, by_id: dict[str, AnalysisRule]) -> AnalysisRule | None:
    if check_id in by_id:
        return by_id[check_id]
    for rule_id, rule in by_id.items():
        if check_id.endswith("." + rule_id):
            return rule
    return None


def _relative(path: str, root: Path) -> str:
    p = Path(path)
    if root.is_dir():
        try:
            return p.resolve().relative_to(root.resolve()).as_posix()
        except ValueError:
            return p.as_posix()
    return root.name


def _hits_from(findings: Iterable[Finding], by_id: dict[str, AnalysisRule], root: Path) -> list[ScanHit]:
    hits = []
    for f in findings:
        rule = _match_rule(f.check_id, by_id)
        if rule is None:
            log.warning("finding from unknown rule %s ignored", f.check_id)
            continue
        hits.append(ScanHit(_relative(f.path, root), f.start_line, f.end_line, rule.rule_id, rule.cluster_id))
    return hits


def scan(code_path: str | Path, rules: Sequence[AnalysisRule], engine: RuleEngine) -> list[ScanHit]:
    """Run every rule over ``code_path``; a rule the engine rejects is skipped.

    All rules are tried in one batched engine run first; if that run fails,
    each rule is run alone so one broken rule cannot hide the others' hits.
    """
    root = Path(code_path)
    by_id = {r.rule_id: r for r in rules}
    if not by_id:
        return []
    with tempfile.TemporaryDirectory(prefix="strat-forge-scan-") as tmp:
        rule_dir = Path(tmp) / "rules"
        rule_dir.mkdir()
        for rule in by_id.values():
            (rule_dir / f"{rule.rule_id}.yaml").write_text(rule.yaml_text, encoding="utf-8")
        result = engine.run(rule_dir, root)
        if result.ok:
            hits = _hits_from(result.findings, by_id, root)
        else:
            log.warning("batched scan failed (%s); retrying rule by rule", result.error_text())
            hits = []
            for rule_id in sorted(by_id):
                single = engine.run(rule_dir / f"{rule_id}.yaml", root)
                if not single.ok:
                    log.warning("rule %s skipped: %s", rule_id, single.error_text())
                    continue
                hits.extend(_hits_from(single.findings, by_id, root))
    return sorted(set(hits), key=lambda h: (h.file_path, h.start_line, h.end_line, h.rule_id))


def scan_library(code_path: str | Path, library: Library, engine: RuleEngine) -> list[ScanHit]:
    skip = set(library.ruleless)
    return scan(code_path, [r for r in library.validated_rules() if r.cluster_id not in skip], engine)


FunctionResolver = Callable[[str, int], str]


def resolver_for_sources(sources: dict[str, str]) -> FunctionResolver:
    """Map (file, line) to the enclosing function name using the brace scanner."""
    spans = {path: cscan.find_functions(text) for path, text in sources.items()}

    def resolve(path: str, line: int) -> str:
        span = cscan.function_at(spans.get(path, []), line)
        return span.name if span else ""

    return resolve


def _merge_groups(hits: Sequence[ScanHit]) -> list[list[ScanHit]]:
    groups: list[list[ScanHit]] = []
    end = 0
    for hit in sorted(hits, key=lambda h: (h.start_line, h.end_line, h.rule_id)):
        if groups and hit.start_line <= end:
            groups[-1].append(hit)
            end = max(end, hit.end_line)
        else:
            groups.append([hit])
            end = hit.end_line
    return groups


def aggregate_and_rank(
    hits: Iterable[ScanHit], top_k: int = 25, function_of: FunctionResolver | None = None
) -> list[RankedLocation]:
    """Merge overlapping hits, count distinct rules, keep the top ``top_k`` per function."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    by_file: dict[str, list[ScanHit]] = defaultdict(list)
    for hit in hits:
        by_file[hit.file_path].append(hit)
    out: list[RankedLocation] = []
    for path in sorted(by_file):
        per_function: dict[str, list[RankedLocation]] = defaultdict(list)
        for group in _merge_groups(by_file[path]):
            rule_ids = sorted({h.rule_id for h in group})
            rules_per_cluster = Counter()
            for cluster_id, rule_id in {(h.cluster_id, h.rule_id) for h in group}:
                rules_per_cluster[cluster_id] += 1
            cluster_id = min(rules_per_cluster, key=lambda c: (-rules_per_cluster[c], c))
            start = min(h.start_line for h in group)
            end = max(h.end_line for h in group)
            function = function_of(path, start) if function_of else ""
            per_function[function].append(
                RankedLocation(path, function, start, end, cluster_id, len(rule_ids), tuple(rule_ids))
            )
        kept: list[RankedLocation] = []
        for locations in per_function.values():
            locations.sort(key=lambda loc: (-loc.hit_count, loc.start_line))
            kept.extend(locations[:top_k])
        kept.sort(key=lambda loc: (-loc.hit_count, loc.start_line))
        out.extend(kept)
    return out


def number_lines(code: str) -> str:
    lines = code.splitlines()
    width = len(str(len(lines))) if lines else 1
    return "\n".join(f"{idx:>{width}} | {line}" for idx, line in enumerate(lines, 1))


PART_CODE = "Below is the complete code that needs to be optimized, annotated with line numbers:"
PART_LOCATION = "The code to be optimized is located at lines {start}-{end}."
PART_STRATEGY = "Optimization strategy to apply: {strategy}"
PART_INSTRUCTION = (
    "Apply the optimization strategy to the given code segment while preserving "
    "behavior, and provide the complete content of the optimized code in a single "
    "fenced code block, without line numbers."
)


def build_prompt(
    full_code: str,
    location: RankedLocation | tuple[int, int],
    strategy_text: str,
    mode: AblationMode = AblationMode.FULL,
) -> str:
    """Four-part optimization prompt: numbered code, line range, strategy, instruction."""
    start, end = (
        (location.start_line, location.end_line) if isinstance(location, RankedLocation) else location
    )
    n_lines = len(full_code.splitlines())
    if not 1 <= start <= end <= n_lines:
        raise ValueError(f"location {start}-{end} outside code of {n_lines} lines")
    parts = [f"{PART_CODE}\n```\n{number_lines(full_code)}\n```"]
    if mode is not AblationMode.NO_LOCATION:
        parts.append(PART_LOCATION.format(start=start, end=end))
    if mode is not AblationMode.NO_STRATEGY:
        parts.append(PART_STRATEGY.format(strategy=strategy_text.strip()))
    parts.append(PART_INSTRUCTION)
    return "\n\n".join(parts) + "\n"


_NUMBERED_RE = re.compile(r"^\s*\d+ \| ?")
_NON_CODE_TAGS = prompts.YAML_TAGS | {"diff", "patch", "text", "json"}


def extract_code(response: str) -> str:
    blocks = [body for tag, body in prompts.fenced_blocks(response) if tag not in _NON_CODE_TAGS]
    if not blocks:
        raise GenerationFailed("response contains no code block")
    if len(blocks) > 1:
        log.warning("response has %d code blocks; using the longest", len(blocks))
    code = max(blocks, key=len)
    lines = code.splitlines()
    if lines and all(_NUMBERED_RE.match(line) for line in lines if line.strip()):
        code = "\n".join(_NUMBERED_RE.sub("", line, count=1) for line in lines) + "\n"
    return code


def generate_optimization(
    prompt: str,
    provider: CompletionProvider,
    original_code: str,
    *,
    sample: int = 0,
    location: RankedLocation | None = None,
    strategy_text: str = "",
    mode: AblationMode = AblationMode.FULL,
    file_path: str = "code",
) -> OptimizationCandidate:
    from .evaluation import exact_match

    response = provider.complete(prompt, sample=sample)
    optimized = extract_code(response)
    if not original_code.endswith("\n") and optimized.endswith("\n"):
        optimized = optimized[:-1]
    elif original_code.endswith("\n") and not optimized.endswith("\n"):
        optimized += "\n"
    if exact_match(optimized, original_code):
        raise NoChange("generated code equals the original")
    return OptimizationCandidate(
        file_path=file_path,
        function_name=location.function_name if location else "",
        start_line=location.start_line if location else 1,
        end_line=location.end_line if location else len(original_code.splitlines()),
        strategy_text=strategy_text,
        original_code=original_code,
        optimized_code=optimized,
        diff=make_unified_diff(original_code, optimized, file_path),
        ablation_mode=mode,
        cluster_id=location.cluster_id if location else "",
        hit_count=location.hit_count if location else 0,
    )


@dataclass
class OptimizeOutcome:
    candidates: list[OptimizationCandidate]
    failures: list[tuple[RankedLocation, str]]


def optimize_code(
    code: str,
    locations: Sequence[RankedLocation],
    library: Library,
    provider: CompletionProvider,
    mode: AblationMode = AblationMode.FULL,
    file_path: str = "code",
    sample: int = 0,
) -> OptimizeOutcome:
    """One generation per ranked location; the whole of ``code`` is the prompt context."""
    strategies = {c.cluster_id: c.strategy_text for c in library.clusters}
    candidates, failures = [], []
    for loc in locations:
        prompt = build_prompt(code, loc, strategies.get(loc.cluster_id, ""), mode)
        try:
            cand = generate_optimization(
                prompt,
                provider,
                code,
                sample=sample,
                location=loc,
                strategy_text=strategies.get(loc.cluster_id, ""),
                mode=mode,
                file_path=file_path,
            )
        except (GenerationFailed, NoChange) as exc:
            failures.append((loc, f"{type(exc).__name__}: {exc}"))
            continue
        candidates.append(cand)
    return OptimizeOutcome(candidates, failures)


def optimize_target(
    target: str | Path,
    library: Library,
    provider: CompletionProvider,
    engine: RuleEngine,
    top_k: int = 25,
    mode: AblationMode = AblationMode.FULL,
) -> OptimizeOutcome:
    """Scan a file or directory and generate a candidate per ranked location.

    The prompt carries the enclosing function (re-numbered from 1) when the
    location lies in one, otherwise the whole file. ``file_diff`` on each
    candidate applies with ``patch -p1`` from the target root.
    """
    root = Path(target)
    files = {
        p.relative_to(root).as_posix() if root.is_dir() else root.name: p
        for p in ([root] if root.is_file() else sorted(root.rglob("*")))
        if p.is_file()
    }
    hits = scan_library(root, library, engine)
    sources = {rel: files[rel].read_text(encoding="utf-8", errors="replace") for rel in {h.file_path for h in hits}}
    spans = {rel: cscan.find_functions(text) for rel, text in sources.items()}
    locations = aggregate_and_rank(hits, top_k, resolver_for_sources(sources))
    out = OptimizeOutcome([], [])
    for loc in locations:
        text = sources[loc.file_path]
        span = cscan.function_at(spans[loc.file_path], loc.start_line)
        if span is not None and loc.end_line <= span.end_line:
            offset = span.start_line - 1
            code = cscan.extract_lines(text, span.start_line, span.end_line)
        else:
            offset, code = 0, text
        local = RankedLocation(
            loc.file_path, loc.function_name, loc.start_line - offset, loc.end_line - offset,
            loc.cluster_id, loc.hit_count, loc.rule_ids,
        )
        result = optimize_code(code, [local], library, provider, mode, loc.file_path)
        out.failures.extend((loc, why) for _, why in result.failures)
        for cand in result.candidates:
            lines = text.splitlines(keepends=True)
            end = offset + len(code.splitlines())
            new_text = "".join(lines[:offset]) + cand.optimized_code + "".join(lines[end:])
            cand.start_line, cand.end_line = loc.start_line, loc.end_line
            cand.file_diff = make_unified_diff(text, new_text, loc.file_path)
            out.candidates.append(cand)
    return out
