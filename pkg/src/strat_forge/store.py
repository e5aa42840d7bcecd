"""On-disk strategy library.

Layout::

    library_root/
      index.json                      # written last; the only entry point
      clusters/<cluster_id>/meta.json
      rules/<rule_id>.yaml
      commits.jsonl                   # provenance records for cluster members
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml

from .model import AnalysisRule, CommitRecord, PipelineConfig, RuleStatus, StrategyCluster

LIBRARY_VERSION = 1
META_KEY = "strat-forge"


class LibraryError(ValueError):
    pass


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Library:
    clusters: list[StrategyCluster]
    rules: list[AnalysisRule]
    commits: list[CommitRecord] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    embedder_id: str = ""
    embedding_dim: int = 0
    ruleless: list[str] = field(default_factory=list)

    def cluster(self, cluster_id: str) -> StrategyCluster:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise KeyError(cluster_id)

    def commit(self, commit_hash: str) -> CommitRecord | None:
        for c in self.commits:
            if c.commit_hash == commit_hash:
                return c
        return None

    def validated_rules(self) -> list[AnalysisRule]:
        return [r for r in self.rules if r.status is RuleStatus.VALIDATED]


def rule_provenance(rule: AnalysisRule) -> dict[str, Any]:
    return {
        "cluster_id": rule.cluster_id,
        "source_commit": rule.source_commit,
        "source_repo": rule.source_repo,
        "attempt_index": rule.attempt_index,
        "iterations_used": rule.iterations_used,
        "status": rule.status.value,
    }


def rule_from_yaml(yaml_text: str) -> AnalysisRule:
    doc = yaml.safe_load(yaml_text)
    try:
        (rule,) = doc["rules"]
        meta = rule["metadata"][META_KEY]
    except (TypeError, KeyError, ValueError) as exc:
        raise LibraryError(f"rule file lacks a single rule with provenance metadata: {exc}") from exc
    return AnalysisRule(
        rule_id=rule["id"],
        cluster_id=meta["cluster_id"],
        source_commit=meta["source_commit"],
        yaml_text=yaml_text,
        attempt_index=int(meta["attempt_index"]),
        iterations_used=int(meta["iterations_used"]),
        status=RuleStatus(meta["status"]),
        source_repo=meta.get("source_repo", ""),
    )


def library_store_write(
    library_root: str | Path,
    clusters: Iterable[StrategyCluster],
    rules: Iterable[AnalysisRule],
    *,
    commits: Iterable[CommitRecord] = (),
    config: PipelineConfig | None = None,
    embedder_id: str = "",
    embedding_dim: int = 0,
    ruleless: Iterable[str] = (),
) -> None:
    root = Path(library_root)
    clusters = list(clusters)
    rules = list(rules)
    commits = sorted(commits, key=lambda c: c.commit_hash)
    config = config or PipelineConfig()

    cluster_ids = [c.cluster_id for c in clusters]
    if len(set(cluster_ids)) != len(cluster_ids):
        raise LibraryError("duplicate cluster ids")
    known = set(cluster_ids)
    rule_ids = [r.rule_id for r in rules]
    if len(set(rule_ids)) != len(rule_ids):
        raise LibraryError("duplicate rule ids")
    for rule in rules:
        if rule.cluster_id not in known:
            raise LibraryError(f"rule {rule.rule_id} references unknown cluster {rule.cluster_id}")
        if rule_from_yaml(rule.yaml_text).rule_id != rule.rule_id:
            raise LibraryError(f"rule {rule.rule_id}: YAML id does not match")
    for cid in ruleless:
        if cid not in known:
            raise LibraryError(f"ruleless cluster {cid} is not in the cluster list")

    for cluster in clusters:
        meta = {
            "strategy_text": cluster.strategy_text,
            "member_hashes": list(cluster.member_hashes),
            "size": cluster.size,
        }
        atomic_write_text(root / "clusters" / cluster.cluster_id / "meta.json", dumps_json(meta))
    for rule in rules:
        atomic_write_text(root / "rules" / f"{rule.rule_id}.yaml", rule.yaml_text)
    atomic_write_text(
        root / "commits.jsonl",
        "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in commits),
    )

    index = {
        "version": LIBRARY_VERSION,
        "config": config.to_dict(),
        "seed": config.seed,
        "embedder": {"id": embedder_id, "dim": embedding_dim},
        "eps_sim": config.eps_sim,
        "eps_cosine_distance": round(1.0 - config.eps_sim, 12),
        "clusters": cluster_ids,
        "rules": [{"rule_id": r.rule_id, "cluster_id": r.cluster_id, "file": f"rules/{r.rule_id}.yaml"} for r in rules],
        "ruleless_clusters": sorted(set(ruleless)),
    }
    atomic_write_text(root / "index.json", dumps_json(index))
    _remove_stale(root, set(cluster_ids), {f"{rid}.yaml" for rid in rule_ids})


def _remove_stale(root: Path, cluster_ids: set[str], rule_files: set[str]) -> None:
    cdir = root / "clusters"
    if cdir.is_dir():
        for entry in cdir.iterdir():
            if entry.is_dir() and entry.name not in cluster_ids:
                shutil.rmtree(entry)
    rdir = root / "rules"
    if rdir.is_dir():
        for entry in rdir.iterdir():
            if entry.is_file() and entry.name not in rule_files:
                entry.unlink()


def library_store_read(library_root: str | Path) -> Library:
    root = Path(library_root)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise LibraryError(f"{root} is not a strategy library (no index.json)")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    if index.get("version") != LIBRARY_VERSION:
        raise LibraryError(f"unsupported library version {index.get('version')}")
    clusters = []
    for cid in index["clusters"]:
        meta = json.loads((root / "clusters" / cid / "meta.json").read_text(encoding="utf-8"))
        clusters.append(StrategyCluster.from_dict({"cluster_id": cid, **meta}))
    rules = []
    for entry in index["rules"]:
        rule = rule_from_yaml((root / entry["file"]).read_text(encoding="utf-8"))
        if rule.rule_id != entry["rule_id"] or rule.cluster_id != entry["cluster_id"]:
            raise LibraryError(f"rule file {entry['file']} disagrees with the index")
        rules.append(rule)
    commits = []
    commits_path = root / "commits.jsonl"
    if commits_path.is_file():
        for line in commits_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                commits.append(CommitRecord.from_dict(json.loads(line)))
    return Library(
        clusters=clusters,
        rules=rules,
        commits=commits,
        config=index.get("config", {}),
        seed=index.get("seed", 0),
        embedder_id=index["embedder"]["id"],
        embedding_dim=index["embedder"]["dim"],
        ruleless=list(index.get("ruleless_clusters", [])),
    )


def write_library(root: str | Path, lib: Library) -> None:
    """Write a previously read Library back out unchanged."""
    config = PipelineConfig.from_dict(lib.config) if lib.config else PipelineConfig()
    library_store_write(
        root,
        lib.clusters,
        lib.rules,
        commits=lib.commits,
        config=config,
        embedder_id=lib.embedder_id,
        embedding_dim=lib.embedding_dim,
        ruleless=lib.ruleless,
    )
