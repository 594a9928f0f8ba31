"""Reference routing policies: random load balancing and the fluid model.

All policies consume the demand stream of ``demand_seed`` in the same order,
so scores of different policies on one seed are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dqn_agent import run_greedy_episode
from .gnn_q import QNetworkParams
from .graph_core import Topology
from .otn_env import DEFAULT_CAPACITY, TrafficDemand, generate_demand, init_env, step
from .path_engine import CandidatePath, PathTable

POLICIES = ("gnn", "lb", "fluid")


def lb_select(paths: Sequence[CandidatePath], rng: np.random.Generator) -> CandidatePath:
    if not paths:
        raise ValueError("no candidate paths")
    return paths[int(rng.integers(len(paths)))]


@dataclass
class FluidState:
    available: np.ndarray
    share_log: list[tuple[TrafficDemand, np.ndarray]] = field(default_factory=list)


def fluid_step(
    fstate: FluidState, demand: TrafficDemand, paths: Sequence[CandidatePath]
) -> tuple[float, bool, FluidState]:
    """Split ``demand`` over ``paths`` in proportion to their bottleneck capacity.

    Shares are subtracted link by link, so links common to several candidate
    paths take every share routed over them.  If the split would drive any
    link negative (or no path has capacity) the episode ends and the state is
    returned unchanged.
    """
    if not paths:
        raise ValueError("no candidate paths")
    caps = np.array([min(fstate.available[l] for l in p.links) for p in paths])
    caps = np.maximum(caps, 0.0)
    total = caps.sum()
    if total <= 0:
        return 0.0, True, fstate
    shares = demand.bandwidth * caps / total
    avail = fstate.available.copy()
    for p, share in zip(paths, shares):
        avail[list(p.links)] -= share
    # tolerance absorbs rounding when a path is filled exactly to zero
    if (avail < -1e-9).any():
        return 0.0, True, fstate
    avail = np.maximum(avail, 0.0)
    return float(demand.bandwidth), False, FluidState(avail, fstate.share_log + [(demand, shares)])


def run_lb_episode(topo, table, demand_seed, policy_seed, capacity=DEFAULT_CAPACITY, demand_log=None) -> float:
    rng = np.random.default_rng(demand_seed)
    choice_rng = np.random.default_rng(policy_seed)
    state, demand = init_env(topo, table, rng, capacity)
    score, done = 0.0, False
    while not done:
        if demand_log is not None:
            demand_log.append(demand)
        path = lb_select(table[(demand.src, demand.dst)], choice_rng)
        out = step(state, demand, path, rng)
        score += out.reward
        state, demand, done = out.next_state, out.next_demand, out.done
    return score


def run_fluid_episode(topo, table, demand_seed, capacity=DEFAULT_CAPACITY, demand_log=None) -> float:
    rng = np.random.default_rng(demand_seed)
    # same draws as init_env: the demand stream is shared with the other policies
    state, demand = init_env(topo, table, rng, capacity)
    fstate = FluidState(state.available.astype(float))
    score, done = 0.0, False
    while not done:
        if demand_log is not None:
            demand_log.append(demand)
        reward, done, fstate = fluid_step(fstate, demand, table[(demand.src, demand.dst)])
        score += reward
        if not done:
            demand = generate_demand(topo, rng)
    return score


def run_policy_episode(
    policy: str,
    topo: Topology,
    table: PathTable,
    demand_seed,
    params: QNetworkParams | None = None,
    policy_seed=None,
    capacity: float = DEFAULT_CAPACITY,
    demand_log: list | None = None,
) -> float:
    """Cumulative allocated bandwidth of one episode under ``policy``."""
    if policy == "gnn":
        if params is None:
            raise ValueError("the gnn policy needs trained parameters")
        return run_greedy_episode(topo, table, params, demand_seed, capacity, demand_log)
    if policy == "lb":
        return run_lb_episode(topo, table, demand_seed, policy_seed, capacity, demand_log)
    if policy == "fluid":
        return run_fluid_episode(topo, table, demand_seed, capacity, demand_log)
    raise ValueError(f"unknown policy {policy!r}")
