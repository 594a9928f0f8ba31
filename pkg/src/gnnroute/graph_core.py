"""Topology representation, file loaders, degree statistics and link failures.

Nodes are dense integers ``0..N-1`` and links are undirected with dense ids
``0..L-1``.  The original node labels of a loaded file are kept in
``Topology.labels`` so results can be reported against the source dataset.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

GRAPHML_NS = "{http://graphml.graphdrawing.org/xmlns}"


class TopologyError(ValueError):
    """Raised when a topology file cannot be turned into a usable graph."""


class LinkRemovalError(RuntimeError):
    """Raised when no connectivity-preserving link removal was found."""


@dataclass(frozen=True)
class Topology:
    """Undirected graph of ROADM nodes joined by lightpath links.

    ``links[i] == (a, b)`` with ``a < b``; the link id is the list position.
    """

    name: str
    num_nodes: int
    links: tuple[tuple[int, int], ...]
    labels: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for a, b in self.links:
            if a == b:
                raise TopologyError(f"self-loop on node {a}")
            if not (0 <= a < b < self.num_nodes):
                raise TopologyError(f"link ({a}, {b}) is not normalised to a < b < N")
            if (a, b) in seen:
                raise TopologyError(f"duplicate link ({a}, {b})")
            seen.add((a, b))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(self.num_nodes)))

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def nodes(self) -> range:
        return range(self.num_nodes)

    @cached_property
    def node_links(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node, the sorted ``(neighbour, link_id)`` pairs."""
        out: list[list[tuple[int, int]]] = [[] for _ in range(self.num_nodes)]
        for lid, (a, b) in enumerate(self.links):
            out[a].append((b, lid))
            out[b].append((a, lid))
        return tuple(tuple(sorted(x)) for x in out)

    @cached_property
    def link_index(self) -> dict[tuple[int, int], int]:
        idx = {}
        for lid, (a, b) in enumerate(self.links):
            idx[(a, b)] = lid
            idx[(b, a)] = lid
        return idx

    @cached_property
    def link_adjacency(self) -> tuple[tuple[int, ...], ...]:
        """For each link, the sorted ids of the other links sharing an endpoint."""
        adj = []
        for lid, (a, b) in enumerate(self.links):
            nb = {l for _, l in self.node_links[a]} | {l for _, l in self.node_links[b]}
            nb.discard(lid)
            adj.append(tuple(sorted(nb)))
        return tuple(adj)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for a, b in self.links:
            deg[a] += 1
            deg[b] += 1
        return deg

    def is_connected(self) -> bool:
        return _connected(self.num_nodes, self.links)

    def link_between(self, a: int, b: int) -> int:
        return self.link_index[(a, b)]


@dataclass(frozen=True)
class DegreeStats:
    mean_degree: float
    degree_variance: float


def _connected(n: int, links: Iterable[tuple[int, int]]) -> bool:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in links:
        nbrs[a].append(b)
        nbrs[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def from_edges(name: str, edges: Iterable[tuple[object, object]], labels: Sequence[object] | None = None) -> Topology:
    """Build a topology from labelled edges.

    Labels are mapped to dense ids in order of first appearance (``labels``
    first when given); without ``labels``, all-integer labels keep their
    numeric order.  Parallel edges collapse into one link and self-loops are
    dropped.
    """
    edges = [(str(u), str(v)) for u, v in edges]
    if not labels:
        found = list(dict.fromkeys(x for e in edges for x in e))
        if all(_is_int(x) for x in found):
            labels = sorted(found, key=int)
    label_ids: dict[str, int] = {}
    for lab in labels or ():
        label_ids.setdefault(str(lab), len(label_ids))
    pairs = set()
    dropped_loops = 0
    for u, v in edges:
        a = label_ids.setdefault(str(u), len(label_ids))
        b = label_ids.setdefault(str(v), len(label_ids))
        if a == b:
            dropped_loops += 1
            continue
        pairs.add((min(a, b), max(a, b)))
    if len(label_ids) < 2:
        raise TopologyError(f"{name}: graph needs at least 2 nodes")
    if not pairs:
        raise TopologyError(f"{name}: graph has no links")
    links = tuple(sorted(pairs))
    warnings = []
    if dropped_loops:
        warnings.append(f"dropped {dropped_loops} self-loop(s)")
    if not _connected(len(label_ids), links):
        warnings.append("disconnected")
        log.warning("%s: topology is disconnected", name)
    return Topology(
        name=name,
        num_nodes=len(label_ids),
        links=links,
        labels=tuple(label_ids),
        warnings=tuple(warnings),
    )


def _parse_edgelist(path: Path) -> tuple[list[tuple[str, str]], list[str]]:
    edges = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise TopologyError(f"{path}:{lineno}: expected 'a b', got {raw!r}")
        edges.append((parts[0], parts[1]))
    return edges, []


def _parse_graphml(path: Path) -> tuple[list[tuple[str, str]], list[str]]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise TopologyError(f"{path}: {exc}") from exc
    graphs = root.findall(f"{GRAPHML_NS}graph") or root.findall("graph")
    if len(graphs) != 1:
        raise TopologyError(f"{path}: expected exactly one <graph>, found {len(graphs)}")
    graph = graphs[0]
    ns = GRAPHML_NS if graph.tag.startswith("{") else ""
    nodes = []
    for n in graph.iter(f"{ns}node"):
        if "id" not in n.attrib:
            raise TopologyError(f"{path}: node without id")
        nodes.append(n.attrib["id"])
    edges = []
    for e in graph.iter(f"{ns}edge"):
        try:
            edges.append((e.attrib["source"], e.attrib["target"]))
        except KeyError as exc:
            raise TopologyError(f"{path}: edge without {exc.args[0]}") from exc
    return edges, nodes


def load_topology(source: str | Path, fmt: str | None = None) -> Topology:
    """Load a topology from a GraphML or whitespace edge-list file.

    ``fmt`` is inferred from the suffix when omitted (``.graphml``/``.xml`` is
    GraphML, anything else an edge list).  The topology name is the file stem.
    """
    path = Path(source)
    if fmt is None:
        fmt = "graphml" if path.suffix.lower() in (".graphml", ".xml") else "edgelist"
    if not path.is_file():
        raise TopologyError(f"{path}: no such file")
    if fmt == "graphml":
        edges, nodes = _parse_graphml(path)
    elif fmt == "edgelist":
        edges, nodes = _parse_edgelist(path)
    else:
        raise ValueError(f"unknown topology format {fmt!r}")
    # isolated nodes would never carry traffic; only nodes with links are kept
    used = {str(x) for e in edges for x in e}
    return from_edges(path.stem, edges, [n for n in nodes if n in used])


def builtin_topology(name: str) -> Topology:
    """Bundled reference topologies: ``nsfnet`` (14 nodes) and ``geant2`` (24 nodes)."""
    ref = resources.files("gnnroute.data").joinpath(f"{name.lower()}.txt")
    if not ref.is_file():
        raise TopologyError(f"no bundled topology named {name!r}")
    with resources.as_file(ref) as p:
        return load_topology(p, "edgelist")


def resolve_topology(spec: str | Path) -> Topology:
    """Load ``spec`` as a file path, falling back to a bundled topology name."""
    path = Path(spec)
    if path.is_file():
        return load_topology(path)
    return builtin_topology(str(spec))


def degree_stats(topo: Topology) -> DegreeStats:
    deg = topo.degrees().astype(float)
    return DegreeStats(mean_degree=2.0 * topo.num_links / topo.num_nodes, degree_variance=float(deg.var()))


@dataclass
class FilterReport:
    kept: list[Topology] = field(default_factory=list)
    rejected: dict[str, list[str]] = field(default_factory=dict)


def rejection_reasons(
    topo: Topology,
    min_nodes: int = 5,
    max_nodes: int = 50,
    degree_range: tuple[float, float] = (2.0, 4.0),
    ratio_threshold: float = 0.3,
    orientation: str = "mean/var",
) -> list[str]:
    """Reasons ``topo`` fails the evaluation-dataset filter (empty when kept).

    The spread test uses ``mean_degree / degree_variance > ratio_threshold``
    by default; a regular graph (zero variance, e.g. a ring) is always
    rejected.  ``orientation="var/mean"`` flips the ratio.
    """
    stats = degree_stats(topo)
    reasons = []
    if topo.num_nodes <= min_nodes:
        reasons.append(f"N={topo.num_nodes} <= {min_nodes}")
    if topo.num_nodes > max_nodes:
        reasons.append(f"N={topo.num_nodes} > {max_nodes}")
    lo, hi = degree_range
    if not lo <= stats.mean_degree <= hi:
        reasons.append(f"mean degree {stats.mean_degree:.3f} outside [{lo}, {hi}]")
    if stats.degree_variance <= 1e-12:
        reasons.append("zero degree variance (regular/ring)")
    else:
        if orientation == "mean/var":
            ratio = stats.mean_degree / stats.degree_variance
        elif orientation == "var/mean":
            ratio = stats.degree_variance / stats.mean_degree
        else:
            raise ValueError(f"unknown ratio orientation {orientation!r}")
        if ratio <= ratio_threshold:
            reasons.append(f"{orientation} ratio {ratio:.3f} <= {ratio_threshold}")
    if "disconnected" in topo.warnings:
        reasons.append("disconnected")
    return reasons


def filter_topologies(topos: Iterable[Topology], **criteria) -> FilterReport:
    """Keep topologies suited to routing evaluation; see :func:`rejection_reasons`."""
    report = FilterReport()
    for topo in topos:
        reasons = rejection_reasons(topo, **criteria)
        if reasons:
            report.rejected[topo.name] = reasons
        else:
            report.kept.append(topo)
    return report


def remove_links(topo: Topology, link_ids: Iterable[int]) -> Topology:
    drop = set(link_ids)
    links = tuple(l for i, l in enumerate(topo.links) if i not in drop)
    warnings = tuple(w for w in topo.warnings if w != "disconnected")
    if not _connected(topo.num_nodes, links):
        warnings += ("disconnected",)
    return Topology(
        name=topo.name,
        num_nodes=topo.num_nodes,
        links=links,
        labels=topo.labels,
        warnings=warnings,
    )


def remove_random_links(topo: Topology, n: int, rng: np.random.Generator, max_retries: int = 1000) -> Topology:
    """Remove ``n`` uniformly chosen links while keeping the graph connected.

    Candidate removals are resampled until one leaves the graph connected;
    :class:`LinkRemovalError` is raised once ``max_retries`` draws fail.
    """
    if not 0 <= n < topo.num_links:
        raise ValueError(f"cannot remove {n} of {topo.num_links} links")
    if n == 0:
        return topo
    for _ in range(max_retries):
        drop = set(int(i) for i in rng.choice(topo.num_links, size=n, replace=False))
        kept = [l for i, l in enumerate(topo.links) if i not in drop]
        if _connected(topo.num_nodes, kept):
            return remove_links(topo, drop)
    raise LinkRemovalError(f"{topo.name}: no connected {n}-link removal in {max_retries} draws")


def relabel(topo: Topology, node_perm: Sequence[int], link_order: Sequence[int] | None = None) -> Topology:
    """Isomorphic copy with node ``i`` renamed ``node_perm[i]``.

    ``link_order`` gives the new position of each old link; by default links
    are re-sorted by their renamed endpoints.
    """
    renamed = [tuple(sorted((node_perm[a], node_perm[b]))) for a, b in topo.links]
    if link_order is None:
        links = tuple(sorted(renamed))
    else:
        links_l: list = [None] * len(renamed)
        for old, new in enumerate(link_order):
            links_l[new] = renamed[old]
        links = tuple(links_l)
    labels = [""] * topo.num_nodes
    for old, new in enumerate(node_perm):
        labels[new] = topo.labels[old]
    return Topology(name=topo.name, num_nodes=topo.num_nodes, links=links, labels=tuple(labels))
