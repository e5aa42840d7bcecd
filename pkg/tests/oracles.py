"""Brute-force reference implementations written independently of the package."""

from __future__ import annotations

import itertools
import math
from collections import Counter

import networkx as nx


def cosine(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def density_partition(points: dict[str, list[float]], eps: float, min_pts: int):
    """Partition as a set of frozensets plus the noise set.

    Core points: at least ``min_pts`` points (self included) within sim >= eps.
    Clusters: connected components of the graph on core points. A border point
    goes to the component of its core neighbor with the smallest hash.
    """
    names = sorted(points)
    near = {a: {b for b in names if a == b or cosine(points[a], points[b]) >= eps} for a in names}
    core = {a for a in names if len(near[a]) >= min_pts}
    graph = nx.Graph()
    graph.add_nodes_from(core)
    graph.add_edges_from((a, b) for a in core for b in near[a] if b in core and a != b)
    component = {}
    for comp in nx.connected_components(graph):
        key = frozenset(comp)
        for node in comp:
            component[node] = key
    members = {key: set(key) for key in set(component.values())}
    noise = set()
    for a in names:
        if a in core:
            continue
        owners = sorted(b for b in near[a] if b in core)
        if owners:
            members[component[owners[0]]].add(a)
        else:
            noise.add(a)
    return {frozenset(m) for m in members.values()}, noise


def best_summary_index(vectors) -> int:
    m = len(vectors)
    if m == 1:
        return 0
    averages = []
    for i in range(m):
        others = [cosine(vectors[i], vectors[j]) for j in range(m) if j != i]
        averages.append(sum(others) / len(others))
    best = max(averages)
    return averages.index(best)


def rank_locations(hits, top_k: int, function_of=lambda path, line: ""):
    """Hits are (file, start, end, rule_id, cluster_id) tuples.

    Returns (file, function, start, end, cluster_id, hit_count, rule_ids) tuples
    in output order: file, then hit_count descending, then start line.
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(len(hits)))
    for i, j in itertools.combinations(range(len(hits)), 2):
        a, b = hits[i], hits[j]
        if a[0] == b[0] and max(a[1], b[1]) <= min(a[2], b[2]):
            graph.add_edge(i, j)
    locations = []
    for comp in nx.connected_components(graph):
        group = [hits[i] for i in comp]
        rule_ids = tuple(sorted({g[3] for g in group}))
        per_cluster = Counter(c for c, _ in {(g[4], g[3]) for g in group})
        top = max(per_cluster.values())
        cluster = sorted(c for c, n in per_cluster.items() if n == top)[0]
        start = min(g[1] for g in group)
        end = max(g[2] for g in group)
        path = group[0][0]
        locations.append((path, function_of(path, start), start, end, cluster, len(rule_ids), rule_ids))
    buckets: dict[tuple[str, str], list] = {}
    for loc in locations:
        buckets.setdefault((loc[0], loc[1]), []).append(loc)
    kept = []
    for bucket in buckets.values():
        bucket.sort(key=lambda loc: (-loc[5], loc[2]))
        kept.extend(bucket[:top_k])
    kept.sort(key=lambda loc: (loc[0], -loc[5], loc[2]))
    return kept
