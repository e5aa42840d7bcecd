"""Subprocess wrapper around the Semgrep rule engine."""

from __future__ import annotations

import json
import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .model import Language

log = logging.getLogger(__name__)

SOURCE_SUFFIX = {Language.C: ".c", Language.CPP: ".cpp"}


class EngineUnavailable(RuntimeError):
    """The engine binary could not be executed at all."""


@dataclass(frozen=True)
class Finding:
    check_id: str
    path: str
    start_line: int
    end_line: int


@dataclass
class EngineResult:
    returncode: int
    findings: list[Finding] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.returncode == 0 and not self.errors

    def error_text(self) -> str:
        return "\n".join(self.errors) or f"engine exited with status {self.returncode}"


class RuleEngine(Protocol):
    identity: str

    def run(self, config: Path, target: Path) -> EngineResult: ...


def parse_engine_json(stdout: str, returncode: int, stderr: str = "") -> EngineResult:
    try:
        data = json.loads(stdout) if stdout.strip() else {}
    except json.JSONDecodeError:
        data = {}
    findings = [
        Finding(
            check_id=str(r.get("check_id", "")),
            path=str(r.get("path", "")),
            start_line=int(r["start"]["line"]),
            end_line=int(r["end"]["line"]),
        )
        for r in data.get("results", [])
    ]
    errors = []
    for err in data.get("errors", []):
        if err.get("level", "error") != "error":
            continue
        text = err.get("long_msg") or err.get("message") or err.get("short_msg") or ""
        errors.append(f"{err.get('type', 'error')}: {text}".strip())
    if returncode != 0 and not errors:
        errors.append((stderr.strip().splitlines() or [f"exit status {returncode}"])[-1])
    return EngineResult(returncode, findings, errors)


class SemgrepEngine:
    def __init__(self, path: str = "semgrep", timeout: float = 120.0, jobs: int = 1):
        self.path = path
        self.timeout = timeout
        self.jobs = jobs
        self.identity = f"semgrep:{path}"

    def version(self) -> str:
        try:
            out = subprocess.run([self.path, "--version"], capture_output=True, text=True, timeout=60)
        except FileNotFoundError as exc:
            raise EngineUnavailable(f"rule engine not found: {self.path}") from exc
        return out.stdout.strip()

    def run(self, config: Path, target: Path) -> EngineResult:
        cmd = [
            self.path,
            "--config",
            str(config),
            "--json",
            "--metrics=off",
            "--disable-version-check",
            "--quiet",
            "--no-git-ignore",
            "--jobs",
            str(self.jobs),
            str(target),
        ]
        env = {**os.environ, "SEMGREP_SEND_METRICS": "off", "SEMGREP_ENABLE_VERSION_CHECK": "0"}
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout, env=env)
        except FileNotFoundError as exc:
            raise EngineUnavailable(f"rule engine not found: {self.path}") from exc
        except subprocess.TimeoutExpired:
            return EngineResult(-1, [], [f"engine timed out after {self.timeout:.0f}s"])
        return parse_engine_json(proc.stdout, proc.returncode, proc.stderr)


def run_rule_on_code(engine: RuleEngine, yaml_text: str, code: str, language: Language) -> EngineResult:
    """Run one rule against one code snippet in a private temp directory."""
    with tempfile.TemporaryDirectory(prefix="strat-forge-") as tmp:
        root = Path(tmp)
        rule_path = root / "rule.yaml"
        target = root / f"target{SOURCE_SUFFIX[language]}"
        rule_path.write_text(yaml_text, encoding="utf-8")
        target.write_text(code, encoding="utf-8")
        return engine.run(rule_path, target)
