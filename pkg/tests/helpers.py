"""Independent oracles and graph generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from gnnroute.graph_core import Topology, from_edges

# acceptance criterion number -> (passed, detail), printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def triangle() -> Topology:
    return from_edges("triangle", [(0, 1), (1, 2), (2, 0)])


def ring(n: int) -> Topology:
    return from_edges(f"ring{n}", [(i, (i + 1) % n) for i in range(n)])


def star(n: int) -> Topology:
    return from_edges(f"star{n}", [(0, i) for i in range(1, n)])


def path_graph(n: int) -> Topology:
    return from_edges(f"path{n}", [(i, i + 1) for i in range(n - 1)])


def random_connected(rng: np.random.Generator, n: int, extra: float = 0.3, name: str = "rand") -> Topology:
    """Random spanning tree plus each remaining pair with probability ``extra``."""
    order = rng.permutation(n)
    edges = set()
    for i in range(1, n):
        j = int(rng.integers(i))
        a, b = int(order[i]), int(order[j])
        edges.add((min(a, b), max(a, b)))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < extra:
                edges.add((a, b))
    return from_edges(name, sorted(edges), labels=range(n))


def all_simple_paths(topo: Topology, src: int, dst: int) -> list[tuple[int, ...]]:
    """Every simple src->dst node sequence, by plain exhaustive DFS."""
    nbrs = {u: sorted(v for v, _ in topo.node_links[u]) for u in topo.nodes}
    out = []

    def dfs(path):
        u = path[-1]
        if u == dst:
            out.append(tuple(path))
            return
        for v in nbrs[u]:
            if v not in path:
                dfs(path + [v])

    dfs([src])
    return out


def brute_k_shortest(topo: Topology, src: int, dst: int, k: int) -> list[tuple[int, ...]]:
    return sorted(all_simple_paths(topo, src, dst), key=lambda p: (len(p), p))[:k]
