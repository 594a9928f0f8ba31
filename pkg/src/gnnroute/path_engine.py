"""Candidate paths (k shortest by hop count) and path-based link betweenness."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_core import Topology


@dataclass(frozen=True)
class CandidatePath:
    nodes: tuple[int, ...]
    links: tuple[int, ...]

    @property
    def hop_count(self) -> int:
        return len(self.links)

    @property
    def src(self) -> int:
        return self.nodes[0]

    @property
    def dst(self) -> int:
        return self.nodes[-1]

    @classmethod
    def from_nodes(cls, topo: Topology, nodes) -> "CandidatePath":
        nodes = tuple(int(n) for n in nodes)
        links = tuple(topo.link_between(a, b) for a, b in zip(nodes, nodes[1:]))
        return cls(nodes, links)


def hop_distances(topo: Topology, target: int) -> list[int]:
    """BFS hop distance from every node to ``target`` (-1 if unreachable)."""
    dist = [-1] * topo.num_nodes
    dist[target] = 0
    queue = deque([target])
    while queue:
        u = queue.popleft()
        for v, _ in topo.node_links[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def k_shortest_paths(topo: Topology, src: int, dst: int, k: int) -> list[CandidatePath]:
    """The ``k`` simple paths of fewest hops, ties broken by node sequence.

    Works by iterative deepening on the hop budget: for each budget ``h`` a
    depth-first search visits neighbours in increasing id order and prunes
    any prefix whose BFS distance to ``dst`` exceeds the remaining budget.
    Paths of exactly ``h`` hops therefore come out lexicographically sorted.
    """
    if src == dst:
        raise ValueError("src and dst must differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = hop_distances(topo, dst)
    if dist[src] < 0:
        return []
    found: list[CandidatePath] = []
    nodes = [src]
    links: list[int] = []
    on_path = [False] * topo.num_nodes
    on_path[src] = True

    def extend(u: int, budget: int) -> None:
        # budget = hops still to take; emit only paths of exactly the target length
        if len(found) >= k:
            return
        if budget == 0:
            if u == dst:
                found.append(CandidatePath(tuple(nodes), tuple(links)))
            return
        if u == dst:
            return
        for v, lid in topo.node_links[u]:
            if on_path[v] or dist[v] < 0 or dist[v] > budget - 1:
                continue
            on_path[v] = True
            nodes.append(v)
            links.append(lid)
            extend(v, budget - 1)
            nodes.pop()
            links.pop()
            on_path[v] = False
            if len(found) >= k:
                return

    for hops in range(dist[src], topo.num_nodes):
        extend(src, hops)
        if len(found) >= k:
            break
    return found


@dataclass(frozen=True)
class PathTable:
    """Candidate paths for every ordered ``(src, dst)`` pair with ``src != dst``."""

    k: int
    paths: dict[tuple[int, int], tuple[CandidatePath, ...]]

    def __getitem__(self, pair: tuple[int, int]) -> tuple[CandidatePath, ...]:
        return self.paths[pair]

    def total_paths(self) -> int:
        return sum(len(p) for p in self.paths.values())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst", "rank", "node_sequence"])
            for (s, d), plist in sorted(self.paths.items()):
                for rank, p in enumerate(plist):
                    w.writerow([s, d, rank, "-".join(map(str, p.nodes))])


def build_path_table(topo: Topology, k: int = 4) -> PathTable:
    paths = {}
    for s in topo.nodes:
        for d in topo.nodes:
            if s != d:
                paths[(s, d)] = tuple(k_shortest_paths(topo, s, d, k))
    return PathTable(k=k, paths=paths)


def link_path_counts(topo: Topology, table: PathTable) -> np.ndarray:
    """Number of table paths traversing each link (integer array)."""
    counts = np.zeros(topo.num_links, dtype=np.int64)
    for plist in table.paths.values():
        for p in plist:
            counts[list(p.links)] += 1
    return counts


def link_betweenness(topo: Topology, table: PathTable) -> np.ndarray:
    """Fraction of all table paths that traverse each link."""
    counts = link_path_counts(topo, table).astype(float)
    total = table.total_paths()
    return counts / total if total else counts
