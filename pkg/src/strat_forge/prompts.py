"""Prompt templates and response-parsing helpers.

Replay scripts are keyed by prompt hash, so any edit to a template here
invalidates previously recorded scripts.
"""

from __future__ import annotations

import re

from .model import CommitRecord, Language

_FENCE_RE = re.compile(r"^```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)^```[ \t]*$", re.S | re.M)
YAML_TAGS = {"yaml", "yml"}


def fenced_blocks(text: str) -> list[tuple[str, str]]:
    """All fenced code blocks in ``text`` as ``(language_tag, body)`` pairs."""
    return [(m.group(1).lower(), m.group(2)) for m in _FENCE_RE.finditer(text)]


def strip_yaml_blocks(text: str) -> tuple[str, int]:
    removed = 0

    def drop(m: re.Match[str]) -> str:
        nonlocal removed
        if m.group(1).lower() in YAML_TAGS:
            removed += 1
            return ""
        return m.group(0)

    return _FENCE_RE.sub(drop, text), removed


def engine_language(language: Language) -> str:
    return "c" if language is Language.C else "cpp"


def verify_prompt(message: str, diff: str) -> str:
    return (
        "You are reviewing a commit from a C/C++ project.\n"
        "Decide whether the change is primarily a performance optimization "
        "(faster execution, less memory, fewer allocations or copies) rather "
        "than a bug fix, refactoring or feature.\n"
        "Answer with a single word, YES or NO, on the first line.\n\n"
        f"Commit message:\n{message.strip()}\n\n"
        f"Diff:\n{diff.rstrip()}\n"
    )


def summarize_prompt(commit: CommitRecord) -> str:
    return (
        "Summarize the code optimization strategy applied by this commit in "
        "exactly one sentence. Describe the reusable technique, not the "
        "project-specific details.\n\n"
        f"Codebase: {commit.repo_id}\n"
        f"Commit message: {commit.message.strip()}\n"
        f"Modified function: {commit.function_name}\n"
        f"Diff:\n{commit.diff.rstrip()}\n"
    )


def understand_prompt(commit: CommitRecord) -> str:
    return (
        "Analyze the following optimization commit and explain in detail the "
        "optimization strategy it applies: what code shape was slow, what was "
        "changed, and under which conditions the same change would help "
        "elsewhere.\n"
        "Do NOT write any Semgrep rule or YAML in this answer; explanation only.\n\n"
        f"Function: {commit.function_name}\n"
        f"Diff:\n{commit.diff.rstrip()}\n"
    )


def generate_prompt(analysis: str, commit: CommitRecord, rule_id: str) -> str:
    lang = engine_language(commit.language)
    return (
        "Based on your analysis below, write ONE Semgrep rule that detects code "
        "where the same optimization opportunity exists. The rule must follow "
        "Semgrep's syntax exactly and must match the pre-optimization code shown.\n"
        f"Use `id: {rule_id}` and `languages: [{lang}]`. Return the rule as a "
        "single ```yaml fenced block.\n\n"
        f"Analysis:\n{analysis.strip()}\n\n"
        f"Code before the optimization:\n```{lang}\n{commit.code_before.rstrip()}\n```\n"
    )


def repair_prompt(rule_yaml: str, error: str, commit: CommitRecord, rule_id: str) -> str:
    lang = engine_language(commit.language)
    return (
        "The Semgrep rule below failed validation against the pre-optimization "
        "code. Fix it so that it runs without errors and matches the code.\n"
        f"Keep `id: {rule_id}`. Return the full revised rule as a single ```yaml "
        "fenced block.\n\n"
        f"Current rule:\n```yaml\n{rule_yaml.rstrip()}\n```\n\n"
        f"Error:\n{error.strip()}\n\n"
        f"Code:\n```{lang}\n{commit.code_before.rstrip()}\n```\n"
    )


def direct_prompt(code: str) -> str:
    return (
        "Optimize the performance of the following C/C++ function while "
        "preserving its behavior. Output the complete optimized function in a "
        "single fenced code block.\n\n"
        f"```\n{code.rstrip()}\n```\n"
    )


def rag_prompt(code: str, examples: list[CommitRecord]) -> str:
    parts = [
        "Here are examples of performance optimizations from real commits, "
        "least similar first.\n"
    ]
    for idx, ex in enumerate(examples, 1):
        parts.append(f"Example {idx} ({ex.function_name}):\n```diff\n{ex.diff.rstrip()}\n```\n")
    parts.append(
        "Using these examples as reference, optimize the performance of the "
        "following function while preserving its behavior. Output the complete "
        "optimized function in a single fenced code block.\n\n"
        f"```\n{code.rstrip()}\n```\n"
    )
    return "\n".join(parts)
