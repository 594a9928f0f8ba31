"""OTN traffic-demand allocation MDP.

Links carry ``max_capacity`` ODU0 units shared by both directions.  Each step
routes one demand over a chosen candidate path; the episode ends on the
first demand whose path lacks capacity.  Demands never expire.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph_core import Topology
from .path_engine import CandidatePath, PathTable, link_betweenness

BANDWIDTHS = (8, 32, 64)
DEFAULT_CAPACITY = 200.0


@dataclass(frozen=True)
class TrafficDemand:
    src: int
    dst: int
    bandwidth: int


@dataclass(frozen=True, eq=False)
class EnvState:
    """Per-link capacities plus the static betweenness feature.

    Treated as immutable: allocation returns a new state.
    """

    topology: Topology
    available: np.ndarray
    max_capacity: np.ndarray
    betweenness: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(self.topology, self.available.copy(), self.max_capacity, self.betweenness)

    def with_available(self, available: np.ndarray) -> "EnvState":
        return EnvState(self.topology, available, self.max_capacity, self.betweenness)


@dataclass(frozen=True)
class AllocationResult:
    state: EnvState
    failed_link: int | None = None

    @property
    def ok(self) -> bool:
        return self.failed_link is None


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    done: bool
    next_state: EnvState
    next_demand: TrafficDemand | None


def generate_demand(topo: Topology, rng: np.random.Generator) -> TrafficDemand:
    """Uniform ordered ``(src, dst)`` pair with ``src != dst`` and uniform bandwidth."""
    n = topo.num_nodes
    src = int(rng.integers(n))
    dst = int(rng.integers(n - 1))
    if dst >= src:
        dst += 1
    bw = BANDWIDTHS[int(rng.integers(len(BANDWIDTHS)))]
    return TrafficDemand(src, dst, bw)


def initial_state(topo: Topology, table: PathTable, capacity: float = DEFAULT_CAPACITY) -> EnvState:
    cap = np.full(topo.num_links, float(capacity))
    return EnvState(topo, cap.copy(), cap, link_betweenness(topo, table))


def init_env(
    topo: Topology, table: PathTable, rng: np.random.Generator, capacity: float = DEFAULT_CAPACITY
) -> tuple[EnvState, TrafficDemand]:
    return initial_state(topo, table, capacity), generate_demand(topo, rng)


def tentative_allocate(state: EnvState, path: CandidatePath, bw: float) -> EnvState:
    """Subtract ``bw`` along ``path`` without any capacity check."""
    avail = state.available.copy()
    avail[list(path.links)] -= bw
    return state.with_available(avail)


def try_allocate(state: EnvState, path: CandidatePath, bw: float) -> AllocationResult:
    for lid in path.links:
        if state.available[lid] < bw:
            return AllocationResult(state, lid)
    return AllocationResult(tentative_allocate(state, path, bw))


def _check_endpoints(demand: TrafficDemand, path: CandidatePath) -> None:
    if path.src != demand.src or path.dst != demand.dst:
        raise ValueError(f"path {path.nodes} does not connect demand {demand.src}->{demand.dst}")


def step(state: EnvState, demand: TrafficDemand, path: CandidatePath, rng: np.random.Generator) -> StepOutcome:
    """Allocate ``demand`` on ``path``; on failure the episode ends with reward 0.

    A new demand is drawn from ``rng`` only after a successful allocation, so
    the demand stream of an episode does not depend on the routing policy.
    """
    _check_endpoints(demand, path)
    res = try_allocate(state, path, demand.bandwidth)
    if not res.ok:
        return StepOutcome(0.0, True, state, None)
    return StepOutcome(float(demand.bandwidth), False, res.state, generate_demand(state.topology, rng))


@dataclass
class LogEntry:
    step: int
    src: int
    dst: int
    bandwidth: int
    action_rank: int
    success: bool
    links: tuple[int, ...] = ()


@dataclass
class OTNEnv:
    """Stateful gym-style wrapper around the functional step.

    ``reset`` starts an episode from a demand seed; ``step`` takes an action
    rank into the candidate list of the pending demand.
    """

    topology: Topology
    table: PathTable
    capacity: float = DEFAULT_CAPACITY
    state: EnvState | None = None
    demand: TrafficDemand | None = None
    done: bool = True
    score: float = 0.0
    log: list[LogEntry] = field(default_factory=list)
    _rng: np.random.Generator | None = None

    def reset(self, seed=None) -> tuple[EnvState, TrafficDemand]:
        self._rng = np.random.default_rng(seed)
        self.state, self.demand = init_env(self.topology, self.table, self._rng, self.capacity)
        self.done = False
        self.score = 0.0
        self.log = []
        return self.state, self.demand

    def candidates(self) -> tuple[CandidatePath, ...]:
        return self.table[(self.demand.src, self.demand.dst)]

    def step(self, action_rank: int) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        path = self.candidates()[action_rank]
        demand = self.demand
        out = step(self.state, demand, path, self._rng)
        self.log.append(
            LogEntry(len(self.log), demand.src, demand.dst, demand.bandwidth, action_rank, not out.done, path.links)
        )
        self.state, self.demand, self.done = out.next_state, out.next_demand, out.done
        self.score += out.reward
        return out

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "src", "dst", "bw", "action_rank", "success"])
            for e in self.log:
                w.writerow([e.step, e.src, e.dst, e.bandwidth, e.action_rank, int(e.success)])


def audit_capacity(state: EnvState, log: list[LogEntry]) -> np.ndarray:
    """Per-link difference between consumed capacity and logged allocations (zero when consistent)."""
    used = np.zeros_like(state.available)
    for e in log:
        if e.success:
            used[list(e.links)] += e.bandwidth
    return (state.max_capacity - state.available) - used
