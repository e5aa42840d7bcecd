"""Filter a local commit corpus down to single-function C/C++ optimization commits."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from . import cscan, prompts
from .diffs import ParseError, parse_unified_diff, make_unified_diff
from .model import CommitRecord, Language, RawCommit
from .providers import CompletionProvider

log = logging.getLogger(__name__)

DEFAULT_KEYWORDS: tuple[str, ...] = (
    "optimize",
    "optimization",
    "speed up",
    "speedup",
    "faster",
    "performance",
    "perf",
    "reduce overhead",
    "avoid copy",
    "cache",
)

C_EXTENSIONS = {".c": Language.C, ".h": Language.C}
CPP_EXTENSIONS = {
    ext: Language.CPP for ext in (".cc", ".cpp", ".cxx", ".c++", ".hh", ".hpp", ".hxx", ".h++", ".ipp", ".inl")
}
SOURCE_EXTENSIONS = {**C_EXTENSIONS, **CPP_EXTENSIONS}

OUTSIDE_FUNCTION = ""


class ChangedFunction(NamedTuple):
    file_path: str
    function_name: str
    hunk_span: tuple[int, int]


def language_of(path: str) -> Language | None:
    return SOURCE_EXTENSIONS.get(Path(path).suffix.lower())


def parse_changed_functions(
    diff: str, sources: Mapping[str, str] | None = None
) -> list[ChangedFunction]:
    """Attribute every changed line of ``diff`` to its enclosing function.

    With the pre-image of a file in ``sources`` the function comes from a
    brace-balance scan; otherwise the hunk header's context line is used.
    Changed lines outside any function are reported under the empty name.
    Each span covers the changed old-file lines attributed to that function.
    """
    patches = parse_unified_diff(diff)
    if diff.strip() and not patches:
        raise ParseError("no file headers found", 1)
    spans: dict[tuple[str, str], list[int]] = {}
    order: list[tuple[str, str]] = []
    for patch in patches:
        pre_image = (sources or {}).get(patch.path)
        if pre_image is None and patch.old_path in (sources or {}):
            pre_image = sources[patch.old_path]
        functions = cscan.find_functions(pre_image) if pre_image is not None else None
        for hunk in patch.hunks:
            for line in hunk.changed_old_lines():
                if functions is not None:
                    span = cscan.function_at(functions, line)
                    name = span.name if span else OUTSIDE_FUNCTION
                else:
                    name = cscan.header_function_name(hunk.context) or OUTSIDE_FUNCTION
                key = (patch.path, name)
                if key not in spans:
                    spans[key] = []
                    order.append(key)
                spans[key].append(line)
    return [
        ChangedFunction(path, name, (min(spans[(path, name)]), max(spans[(path, name)])))
        for path, name in order
    ]


def _keyword_pattern(keyword: str) -> re.Pattern[str]:
    words = [re.escape(w) for w in keyword.split()]
    return re.compile(r"\b" + r"\s+".join(words) + r"\b", re.IGNORECASE)


def is_optimization_candidate(message: str, keywords: Sequence[str] = DEFAULT_KEYWORDS) -> bool:
    return any(_keyword_pattern(k).search(message) for k in keywords if k.strip())


_ANSWER_RE = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def llm_verify_optimization(commit: RawCommit, provider: CompletionProvider) -> bool:
    answer = provider.complete(prompts.verify_prompt(commit.message, commit.diff))
    m = _ANSWER_RE.match(answer)
    if not m:
        log.warning("unparseable verification answer for %s: %r", commit.commit_hash, answer[:80])
        return False
    return m.group(1).lower() == "yes"


def _normalize(text: str) -> str:
    return re.sub(r"\s+", "", text.lower())


def dedupe(commits: Iterable[CommitRecord]) -> list[CommitRecord]:
    """Drop commits whose normalized message or normalized diff was already seen."""
    seen_messages: set[str] = set()
    seen_diffs: set[str] = set()
    kept: list[CommitRecord] = []
    for commit in commits:
        msg, diff = _normalize(commit.message), _normalize(commit.diff)
        if msg in seen_messages or diff in seen_diffs:
            continue
        seen_messages.add(msg)
        seen_diffs.add(diff)
        kept.append(commit)
    return kept


@dataclass
class MineResult:
    commits: list[CommitRecord]
    rejected: Counter

    def summary(self) -> dict[str, int]:
        return {"kept": len(self.commits), **dict(sorted(self.rejected.items()))}


def _pick_post_function(post: str, name: str, near_line: int) -> cscan.FunctionSpan | None:
    candidates = [f for f in cscan.find_functions(post) if f.name == name]
    if not candidates:
        return None
    return min(candidates, key=lambda f: abs(f.start_line - near_line))


def extract_commit(raw: RawCommit) -> tuple[CommitRecord | None, str]:
    """Build a CommitRecord if ``raw`` changes exactly one C/C++ function."""
    try:
        patches = parse_unified_diff(raw.diff)
    except ParseError as exc:
        return None, f"malformed-diff: {exc}"
    if not patches:
        return None, "empty-diff"
    for patch in patches:
        if language_of(patch.path) is None:
            return None, "non-c-file"
    sources = {path: before for path, (before, _) in raw.files.items()}
    changed = parse_changed_functions(raw.diff, sources)
    if len(changed) != 1:
        return None, "multi-function" if len(changed) > 1 else "no-function"
    file_path, name, (start, _) = changed[0]
    if name == OUTSIDE_FUNCTION:
        return None, "outside-function"
    if file_path not in raw.files:
        return None, "missing-file-contents"
    before, after = raw.files[file_path]
    pre_span = cscan.function_at(cscan.find_functions(before), start)
    post_span = _pick_post_function(after, name, pre_span.start_line if pre_span else start)
    if pre_span is None or post_span is None:
        return None, "function-not-found"
    code_before = cscan.extract_lines(before, pre_span.start_line, pre_span.end_line)
    code_after = cscan.extract_lines(after, post_span.start_line, post_span.end_line)
    if code_before == code_after:
        return None, "no-function-change"
    record = CommitRecord(
        repo_id=raw.repo_id,
        commit_hash=raw.commit_hash,
        message=raw.message,
        function_name=name,
        code_before=code_before,
        code_after=code_after,
        diff=make_unified_diff(code_before, code_after, file_path),
        language=language_of(file_path),
        file_path=file_path,
    )
    return record, "ok"


def mine(
    corpus: Iterable[RawCommit],
    provider: CompletionProvider | None = None,
    keywords: Sequence[str] = DEFAULT_KEYWORDS,
    workers: int = 1,
) -> MineResult:
    """Run the full filter chain; ``provider=None`` skips LLM verification."""
    raws = list(corpus)

    def filter_one(raw: RawCommit) -> tuple[CommitRecord | None, str]:
        if not is_optimization_candidate(raw.message, keywords):
            return None, "no-keyword"
        record, reason = extract_commit(raw)
        if record is None:
            return None, reason
        if provider is not None and not llm_verify_optimization(raw, provider):
            return None, "llm-rejected"
        return record, "ok"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(filter_one, raws))
    else:
        results = [filter_one(raw) for raw in raws]

    rejected: Counter = Counter()
    survivors: list[CommitRecord] = []
    for raw, (record, reason) in zip(raws, results):
        if record is None:
            rejected[reason.split(":")[0]] += 1
            log.debug("reject %s: %s", raw.commit_hash, reason)
        else:
            survivors.append(record)
    unique = dedupe(survivors)
    if len(unique) < len(survivors):
        rejected["duplicate"] += len(survivors) - len(unique)
    log.info("mined %d of %d commits", len(unique), len(raws))
    return MineResult(unique, rejected)


def load_corpus(corpus_dir: str | Path) -> list[RawCommit]:
    """Read every ``*.jsonl`` file under ``corpus_dir`` in sorted path order."""
    root = Path(corpus_dir)
    files = [root] if root.is_file() else sorted(root.rglob("*.jsonl"))
    commits: list[RawCommit] = []
    for path in files:
        with path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    commits.append(RawCommit.from_dict(json.loads(line)))
                except (KeyError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{line_no}: bad corpus record: {exc}") from exc
    return commits


def load_keywords(path: str | Path) -> list[str]:
    return [
        line.strip()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]


def write_commits(path: str | Path, commits: Iterable[CommitRecord]) -> None:
    from .store import atomic_write_text

    body = "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in commits)
    atomic_write_text(Path(path), body)


def read_commits(path: str | Path) -> list[CommitRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(CommitRecord.from_dict(json.loads(line)))
    return out
