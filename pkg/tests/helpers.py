"""Small builders shared by the test modules."""

from __future__ import annotations

import hashlib
import threading
from dataclasses import replace
from pathlib import Path
from typing import Callable

import yaml

from strat_forge.engine import EngineResult, Finding
from strat_forge.forge import attach_provenance
from strat_forge.model import AnalysisRule, CommitRecord, Language, RuleStatus
from strat_forge.providers import prompt_key


def h(label: str) -> str:
    return hashlib.sha1(label.encode()).hexdigest()


def record(label: str, repo: str = "repo", before: str | None = None, after: str | None = None, **kw) -> CommitRecord:
    before = before if before is not None else f"int f_{label}(int x)\n{{\n    return x + 1;\n}}\n"
    after = after if after is not None else f"int f_{label}(int x)\n{{\n    return x + 2;\n}}\n"
    fields = dict(
        repo_id=repo,
        commit_hash=h(label),
        message=f"optimize {label}",
        function_name=f"f_{label}",
        code_before=before,
        code_after=after,
        diff=f"--- a/x.c\n+++ b/x.c\n@@ -3 +3 @@\n-    return x + 1; // {label}\n+    return x + 2;\n",
        language=Language.C,
    )
    fields.update(kw)
    return CommitRecord(**fields)


def rule_yaml(rule_id: str, pattern: str = "$X + 1", language: str = "c") -> str:
    doc = {"rules": [{"id": rule_id, "languages": [language], "severity": "INFO", "message": "m", "pattern": pattern}]}
    return yaml.safe_dump(doc, sort_keys=False)


def rule(rule_id: str, cluster_id: str, source_commit: str, source_repo: str = "repo", pattern: str = "$X + 1") -> AnalysisRule:
    base = AnalysisRule(rule_id, cluster_id, source_commit, "", 1, 1, RuleStatus.VALIDATED, source_repo)
    return replace(base, yaml_text=attach_provenance(rule_yaml(rule_id, pattern), base))


class StubEngine:
    """Counts invocations; ``policy(config, target)`` decides the result."""

    identity = "stub"

    def __init__(self, policy: Callable[[Path, Path], EngineResult] | None = None):
        self.policy = policy or (lambda config, target: EngineResult(0, [], []))
        self.calls = 0
        self._lock = threading.Lock()

    def run(self, config: Path, target: Path) -> EngineResult:
        with self._lock:
            self.calls += 1
        return self.policy(Path(config), Path(target))


def finding(check_id: str, start: int, end: int | None = None, path: str = "t.c") -> Finding:
    return Finding(check_id, path, start, end if end is not None else start)


class ScriptedProvider:
    """Replay-like provider built in code: maps prompt text (or a predicate) to responses."""

    identity = "scripted"

    def __init__(self, table: dict[str, object] | None = None, fallback: Callable[[str, int], str] | None = None):
        self.table = {prompt_key(k): v for k, v in (table or {}).items()}
        self.fallback = fallback
        self.prompts: list[tuple[str, int]] = []
        self._lock = threading.Lock()

    def complete(self, prompt: str, *, sample: int = 0) -> str:
        with self._lock:
            self.prompts.append((prompt, sample))
        value = self.table.get(prompt_key(prompt))
        if value is None:
            if self.fallback is None:
                raise KeyError("no scripted response")
            return self.fallback(prompt, sample)
        return value[sample] if isinstance(value, list) else value
