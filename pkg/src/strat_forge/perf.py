"""Hotspot selection, measurement protocol, effectiveness gate and variant selection."""

from __future__ import annotations

import json
import logging
import math
import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Any, Iterable, Mapping, Sequence

from .model import Direction

log = logging.getLogger(__name__)

ORIGINAL = "Original"
IMPROVEMENT_THRESHOLD = 0.05
DEGRADATION_LIMIT = -0.02


@dataclass(frozen=True)
class ProfileEntry:
    function_name: str
    self_fraction: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.self_fraction <= 1.0:
            raise ValueError(f"{self.function_name}: fraction {self.self_fraction} outside [0, 1]")


@dataclass(frozen=True)
class PerfMeasurement:
    test_case_id: str
    direction: Direction
    before: float
    after: float

    def __post_init__(self) -> None:
        for value in (self.before, self.after):
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{self.test_case_id}: measurements must be finite and positive")


@dataclass
class VariantReport:
    function_name: str
    variant_id: str
    measurements: list[PerfMeasurement]

    @property
    def ratios(self) -> list[float]:
        return [improvement_ratio(m) for m in self.measurements]

    @property
    def total_score(self) -> float:
        return sum(self.ratios)

    @property
    def effective(self) -> bool:
        return is_effective(self.measurements)

    def to_dict(self) -> dict[str, Any]:
        return {
            "function_name": self.function_name,
            "variant_id": self.variant_id,
            "measurements": [
                {"test_case_id": m.test_case_id, "direction": m.direction.value, "before": m.before, "after": m.after}
                for m in self.measurements
            ],
            "ratios": self.ratios,
            "effective": self.effective,
            "total_score": self.total_score,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> VariantReport:
        return cls(
            data["function_name"],
            data["variant_id"],
            [
                PerfMeasurement(m["test_case_id"], Direction(m["direction"]), float(m["before"]), float(m["after"]))
                for m in data["measurements"]
            ],
        )


def load_profile(path: str | Path) -> list[ProfileEntry]:
    """JSON list of ``{"function", "fraction"}`` objects, or raw ``perf report`` text."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        return parse_perf_report(text)
    entries = [ProfileEntry(d["function"], float(d["fraction"])) for d in json.loads(text)]
    total = sum(e.self_fraction for e in entries)
    if total > 1.0 + 1e-6:
        raise ValueError(f"profile fractions sum to {total:.6f} > 1")
    return entries


_PERF_LINE = re.compile(r"^\s*([0-9.]+)%\s+(?:\S+\s+)*?\[[.k]\]\s+(.+?)\s*$")


def parse_perf_report(text: str) -> list[ProfileEntry]:
    """Adapter for ``perf report --stdio --no-children`` text output."""
    entries: dict[str, float] = {}
    for line in text.splitlines():
        if line.lstrip().startswith("#"):
            continue
        m = _PERF_LINE.match(line)
        if m:
            name = m.group(2)
            entries[name] = entries.get(name, 0.0) + float(m.group(1)) / 100.0
    return [ProfileEntry(name, frac) for name, frac in entries.items()]


def identify_hotspots(profile: Iterable[ProfileEntry], threshold: float = 0.001) -> list[str]:
    """Functions whose self time is strictly above ``threshold`` of the total."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    hot = [e for e in profile if e.self_fraction > threshold]
    hot.sort(key=lambda e: (-e.self_fraction, e.function_name))
    return [e.function_name for e in hot]


def improvement_ratio(m: PerfMeasurement) -> float:
    """Speed gain: (after - before)/before if higher is better, else (before - after)/after."""
    x, y = m.before, m.after
    if x <= 0 or y <= 0:
        raise ValueError("measurements must be positive")
    if m.direction is Direction.HIGHER_BETTER:
        return (y - x) / x
    return (x - y) / y


def is_effective(measurements: Sequence[PerfMeasurement]) -> bool:
    """Some case improves by more than 5% and no case regresses by more than 2%."""
    if not measurements:
        raise ValueError("need at least one measurement")
    ratios = [improvement_ratio(m) for m in measurements]
    return any(r > IMPROVEMENT_THRESHOLD for r in ratios) and all(r >= DEGRADATION_LIMIT for r in ratios)


def combine(variants_by_function: Mapping[str, Sequence[VariantReport]]) -> dict[str, str]:
    """Per function, the effective variant with the highest total score, else ``Original``."""
    selected: dict[str, str] = {}
    for function in sorted(variants_by_function):
        effective = [v for v in variants_by_function[function] if v.effective]
        if not effective:
            selected[function] = ORIGINAL
            continue
        best = min(effective, key=lambda v: (-v.total_score, v.variant_id))
        selected[function] = best.variant_id
    return selected


@dataclass(frozen=True)
class CaseRule:
    """Regex with named groups ``case`` and ``value`` plus the metric direction."""

    pattern: str
    direction: Direction

    def parse(self, output: str) -> dict[str, float]:
        regex = re.compile(self.pattern, re.M)
        return {m.group("case"): float(m.group("value")) for m in regex.finditer(output)}


@dataclass
class ProjectManifest:
    build: str
    unit_test: str
    perf: str
    cases: list[CaseRule]
    timeout: float = 3600.0

    @classmethod
    def load(cls, path: str | Path) -> ProjectManifest:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            build=data.get("build", ""),
            unit_test=data.get("unit_test", ""),
            perf=data["perf"],
            cases=[CaseRule(c["pattern"], Direction(c["direction"])) for c in data["cases"]],
            timeout=float(data.get("timeout", 3600.0)),
        )


class MeasurementError(RuntimeError):
    pass


@dataclass
class MeasureResult:
    means: dict[str, float]
    raw: dict[str, list[float]]
    directions: dict[str, Direction] = field(default_factory=dict)


def _run(cmd: str, cwd: Path | None, timeout: float) -> str:
    proc = subprocess.run(
        shlex.split(cmd), cwd=cwd, capture_output=True, text=True, timeout=timeout
    )
    if proc.returncode != 0:
        raise MeasurementError(f"`{cmd}` exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
    return proc.stdout


def measure(
    test_suite_cmd: str,
    runs: int = 6,
    cases: Sequence[CaseRule] = (),
    cwd: str | Path | None = None,
    timeout: float = 3600.0,
) -> MeasureResult:
    """Run the perf suite ``runs`` times, discard the first run, average the rest per case.

    Runs are strictly sequential.
    """
    if runs < 2:
        raise ValueError("runs must be >= 2")
    raw: dict[str, list[float]] = {}
    directions: dict[str, Direction] = {}
    for run in range(runs):
        output = _run(test_suite_cmd, Path(cwd) if cwd else None, timeout)
        for rule in cases:
            for case, value in rule.parse(output).items():
                raw.setdefault(case, []).append(value)
                directions.setdefault(case, rule.direction)
    for case, values in raw.items():
        if len(values) != runs:
            raise MeasurementError(f"case {case!r} reported in {len(values)} of {runs} runs")
    means = {case: fmean(values[1:]) for case, values in raw.items()}
    return MeasureResult(means, raw, directions)


def run_variant(
    manifest: ProjectManifest,
    baseline_dir: str | Path,
    variant_dir: str | Path,
    function_name: str,
    variant_id: str,
    runs: int = 6,
) -> tuple[VariantReport, dict[str, Any]]:
    """Build and unit-test the variant, then measure baseline and variant sequentially.

    Unit tests gate measurement: a failing variant raises MeasurementError.
    """
    results = {}
    for label, directory in (("baseline", baseline_dir), ("variant", variant_dir)):
        if manifest.build:
            _run(manifest.build, Path(directory), manifest.timeout)
        if manifest.unit_test:
            _run(manifest.unit_test, Path(directory), manifest.timeout)
        results[label] = measure(manifest.perf, runs, manifest.cases, directory, manifest.timeout)
    base, var = results["baseline"], results["variant"]
    cases = sorted(set(base.means) & set(var.means))
    measurements = [PerfMeasurement(c, base.directions[c], base.means[c], var.means[c]) for c in cases]
    report = VariantReport(function_name, variant_id, measurements)
    raw = {"baseline": base.raw, "variant": var.raw}
    return report, raw


def load_reports(directory: str | Path) -> dict[str, list[VariantReport]]:
    grouped: dict[str, list[VariantReport]] = {}
    for path in sorted(Path(directory).glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        if "variant_id" not in data:
            continue
        report = VariantReport.from_dict(data)
        grouped.setdefault(report.function_name, []).append(report)
    return grouped
