"""Summarize commits into strategies and cluster them by cosine similarity."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import prompts
from .model import CommitRecord, StrategyCluster, StrategySummary
from .providers import CompletionProvider, Embedder

log = logging.getLogger(__name__)


class SummarizationError(RuntimeError):
    pass


def summarize_commit(commit: CommitRecord, provider: CompletionProvider, m: int = 3) -> list[str]:
    """Ask the provider for ``m`` independent one-sentence summaries, in call order."""
    if m < 1:
        raise ValueError("m must be >= 1")
    prompt = prompts.summarize_prompt(commit)
    texts = []
    for sample in range(m):
        try:
            text = provider.complete(prompt, sample=sample).strip()
        except Exception as exc:
            raise SummarizationError(f"{commit.commit_hash}: {exc}") from exc
        if not text:
            raise SummarizationError(f"{commit.commit_hash}: empty summary")
        texts.append(text)
    return texts


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def similarity_matrix(vectors: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; symmetric with a unit diagonal."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array of vectors")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    unit = arr / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    sims = (sims + sims.T) / 2.0
    np.fill_diagonal(sims, 1.0)
    return sims


def average_similarities(vectors: Sequence[np.ndarray]) -> list[float]:
    """Mean cosine similarity of each vector to all the others (0 for a singleton)."""
    n = len(vectors)
    if n == 1:
        return [0.0]
    out = []
    for i in range(n):
        total = 0.0
        for j in range(n):
            if j != i:
                total += cosine_similarity(vectors[i], vectors[j])
        out.append(total / (n - 1))
    return out


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for idx, value in enumerate(values):
        if value > values[best]:
            best = idx
    return best


def select_summary(commit_hash: str, candidates: Sequence[str], embedder: Embedder) -> StrategySummary:
    """Pick the candidate with the highest mean similarity to the others (first wins ties)."""
    if not candidates:
        raise ValueError("need at least one candidate summary")
    vectors = [embedder.embed(text) for text in candidates]
    best = _argmax_first(average_similarities(vectors))
    return StrategySummary(
        commit_hash=commit_hash,
        text=candidates[best],
        embedding=tuple(float(x) for x in vectors[best]),
        candidate_texts=tuple(candidates),
    )


@dataclass
class SummaryBatch:
    summaries: list[StrategySummary]
    unsummarized: list[str]


def summarize_all(
    commits: Sequence[CommitRecord],
    provider: CompletionProvider,
    embedder: Embedder,
    m: int = 3,
    workers: int = 1,
) -> SummaryBatch:
    """Summarize and select per commit; failed commits are logged and skipped."""

    def one(commit: CommitRecord) -> StrategySummary | None:
        try:
            candidates = summarize_commit(commit, provider, m)
        except SummarizationError as exc:
            log.warning("unsummarized commit %s: %s", commit.commit_hash, exc)
            return None
        return select_summary(commit.commit_hash, candidates, embedder)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, commits))
    else:
        results = [one(c) for c in commits]
    summaries = [s for s in results if s is not None]
    failed = [c.commit_hash for c, s in zip(commits, results) if s is None]
    return SummaryBatch(summaries, failed)


def cluster_id_for(member_hashes: Sequence[str]) -> str:
    digest = hashlib.sha256("\n".join(sorted(member_hashes)).encode("ascii")).hexdigest()
    return f"c-{digest[:12]}"


def _medoid(indices: Sequence[int], sims: np.ndarray, hashes: Sequence[str]) -> int:
    if len(indices) == 1:
        return indices[0]
    best, best_avg = None, -math.inf
    for i in sorted(indices, key=lambda k: hashes[k]):
        avg = sum(float(sims[i, j]) for j in indices if j != i) / (len(indices) - 1)
        if avg > best_avg:
            best, best_avg = i, avg
    return best


def dbscan_labels(sims: np.ndarray, eps_sim: float, min_pts: int) -> list[int]:
    """DBSCAN over a similarity matrix; -1 marks noise.

    Neighbors satisfy ``sim >= eps_sim`` (a point neighbors itself). Core
    clusters are the connected components of the core-point graph; a border
    point joins the cluster of its lowest-index core neighbor.
    """
    n = sims.shape[0]
    adjacency = sims >= eps_sim
    np.fill_diagonal(adjacency, True)
    core = adjacency.sum(axis=1) >= min_pts
    labels = [-1] * n
    next_label = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        labels[seed] = next_label
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in np.flatnonzero(adjacency[i] & core):
                if labels[j] == -1:
                    labels[j] = next_label
                    queue.append(int(j))
        next_label += 1
    for i in range(n):
        if core[i]:
            continue
        for j in np.flatnonzero(adjacency[i] & core):
            labels[i] = labels[j]
            break
    return labels


def cluster_summaries(
    summaries: Sequence[StrategySummary], eps_sim: float, min_pts: int
) -> tuple[list[StrategyCluster], list[str]]:
    """Cluster summaries with cosine DBSCAN.

    Points are processed in commit-hash order, which makes border assignment
    independent of the input order. Clusters come back sorted by size
    (descending) then smallest member hash; noise hashes are sorted.
    """
    if not 0.0 < eps_sim < 1.0:
        raise ValueError("eps_sim must lie in (0, 1)")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    if not summaries:
        return [], []
    ordered = sorted(summaries, key=lambda s: s.commit_hash)
    hashes = [s.commit_hash for s in ordered]
    if len(set(hashes)) != len(hashes):
        raise ValueError("duplicate commit hashes among summaries")
    dims = {len(s.embedding) for s in ordered}
    if len(dims) != 1:
        raise ValueError(f"embedding dimension mismatch: {sorted(dims)}")
    sims = similarity_matrix([s.embedding for s in ordered])
    labels = dbscan_labels(sims, eps_sim, min_pts)

    groups: dict[int, list[int]] = {}
    for idx, label in enumerate(labels):
        if label >= 0:
            groups.setdefault(label, []).append(idx)
    clusters = []
    for indices in groups.values():
        medoid = _medoid(indices, sims, hashes)
        members = tuple(hashes[i] for i in indices)
        clusters.append(StrategyCluster(cluster_id_for(members), ordered[medoid].text, members))
    clusters.sort(key=lambda c: (-c.size, min(c.member_hashes)))
    noise = [hashes[i] for i, label in enumerate(labels) if label < 0]
    return clusters, noise


def prune_clusters(
    clusters: Sequence[StrategyCluster],
    min_cluster_size: int,
    summaries: Sequence[StrategySummary] | None = None,
) -> list[StrategyCluster]:
    """Drop clusters smaller than ``min_cluster_size``.

    When ``summaries`` are given, each survivor's strategy text is reset to its
    medoid member's summary (max mean similarity to co-members, lowest hash on ties).
    """
    kept = [c for c in clusters if c.size >= min_cluster_size]
    if summaries is None:
        return kept
    by_hash = {s.commit_hash: s for s in summaries}
    out = []
    for cluster in kept:
        members = sorted(cluster.member_hashes)
        sims = similarity_matrix([by_hash[h].embedding for h in members])
        medoid = _medoid(list(range(len(members))), sims, members)
        out.append(StrategyCluster(cluster.cluster_id, by_hash[members[medoid]].text, cluster.member_hashes))
    return out
