"""Domain types shared across the pipeline stages."""

from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field
from typing import Any

_HASH_RE = re.compile(r"^[0-9a-f]{40}$")


class Language(str, enum.Enum):
    C = "C"
    CPP = "CPP"


class RuleStatus(str, enum.Enum):
    VALIDATED = "Validated"
    FAILED = "Failed"


class AttemptOutcome(str, enum.Enum):
    VALIDATED = "Validated"
    EXHAUSTED = "ExhaustedIterations"
    ENGINE_UNAVAILABLE = "EngineUnavailable"
    ABORTED = "Aborted"


class AblationMode(str, enum.Enum):
    FULL = "Full"
    NO_LOCATION = "NoLocation"
    NO_STRATEGY = "NoStrategy"


class Direction(str, enum.Enum):
    HIGHER_BETTER = "HigherBetter"
    LOWER_BETTER = "LowerBetter"


def is_commit_hash(value: str) -> bool:
    return bool(_HASH_RE.match(value))


@dataclass(frozen=True)
class RawCommit:
    """A commit as it appears in the input corpus, before any filtering.

    ``files`` maps each changed path to its ``(before, after)`` contents; either
    side may be empty for added or deleted files.
    """

    repo_id: str
    commit_hash: str
    message: str
    diff: str
    files: dict[str, tuple[str, str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RawCommit:
        files: dict[str, tuple[str, str]] = {}
        for entry in data.get("files", []):
            files[entry["path"]] = (entry.get("before", ""), entry.get("after", ""))
        return cls(
            repo_id=data["repo_id"],
            commit_hash=data["commit_hash"].lower(),
            message=data["message"],
            diff=data["diff"],
            files=files,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "repo_id": self.repo_id,
            "commit_hash": self.commit_hash,
            "message": self.message,
            "diff": self.diff,
            "files": [
                {"path": path, "before": before, "after": after}
                for path, (before, after) in sorted(self.files.items())
            ],
        }


@dataclass(frozen=True)
class CommitRecord:
    """One mined single-function optimization commit."""

    repo_id: str
    commit_hash: str
    message: str
    function_name: str
    code_before: str
    code_after: str
    diff: str
    language: Language
    file_path: str = ""

    def __post_init__(self) -> None:
        if not is_commit_hash(self.commit_hash):
            raise ValueError(f"commit_hash must be 40 lowercase hex chars: {self.commit_hash!r}")
        if self.code_before == self.code_after:
            raise ValueError(f"commit {self.commit_hash} does not change its function")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["language"] = self.language.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CommitRecord:
        return cls(**{**data, "language": Language(data["language"])})


@dataclass(frozen=True)
class StrategySummary:
    commit_hash: str
    text: str
    embedding: tuple[float, ...]
    candidate_texts: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.text not in self.candidate_texts:
            raise ValueError("selected summary must be one of the candidates")

    def to_dict(self) -> dict[str, Any]:
        return {
            "commit_hash": self.commit_hash,
            "text": self.text,
            "embedding": list(self.embedding),
            "candidate_texts": list(self.candidate_texts),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StrategySummary:
        return cls(
            commit_hash=data["commit_hash"],
            text=data["text"],
            embedding=tuple(float(x) for x in data["embedding"]),
            candidate_texts=tuple(data["candidate_texts"]),
        )


@dataclass(frozen=True)
class StrategyCluster:
    cluster_id: str
    strategy_text: str
    member_hashes: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.member_hashes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "strategy_text": self.strategy_text,
            "member_hashes": list(self.member_hashes),
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StrategyCluster:
        members = tuple(data["member_hashes"])
        if "size" in data and data["size"] != len(members):
            raise ValueError(f"cluster {data['cluster_id']}: size does not match member list")
        return cls(data["cluster_id"], data["strategy_text"], members)


@dataclass(frozen=True)
class AnalysisRule:
    rule_id: str
    cluster_id: str
    source_commit: str
    yaml_text: str
    attempt_index: int
    iterations_used: int
    status: RuleStatus = RuleStatus.VALIDATED
    source_repo: str = ""


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline; snapshotted into each run manifest."""

    m_summaries: int = 3
    eps_sim: float = 0.89
    min_cluster_size: int = 3
    n_sample_commits: int = 10
    n_attempts: int = 5
    max_iterations: int = 7
    top_k_locations: int = 25
    temperature: float = 0.0
    min_pts: int = 2
    seed: int = 0
    workers: int = 1
    rag_k: int = 4
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    repeats: int = 3
    hotspot_threshold: float = 0.001
    perf_runs: int = 6
    engine_path: str = "semgrep"
    engine_timeout: float = 120.0
    model: str = "deepseek-chat"
    endpoint: str = ""
    api_key_env: str = "STRAT_FORGE_API_KEY"
    embedder: str = "hashing"
    embedding_dim: int = 256
    keywords: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        counts = (
            "m_summaries",
            "min_cluster_size",
            "n_sample_commits",
            "n_attempts",
            "max_iterations",
            "top_k_locations",
            "min_pts",
            "workers",
            "rag_k",
            "repeats",
            "embedding_dim",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.eps_sim < 1.0:
            raise ValueError("eps_sim must lie in (0, 1)")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 <= self.hotspot_threshold <= 1.0:
            raise ValueError("hotspot_threshold must lie in [0, 1]")
        if self.perf_runs < 2:
            raise ValueError("perf_runs must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        if self.keywords is not None:
            data["keywords"] = list(self.keywords)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        if data.get("keywords") is not None:
            data["keywords"] = tuple(data["keywords"])
        return cls(**data)

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)
