"""DQN training of the link message-passing q-network.

At every step the agent tentatively allocates the demand on each of its k
candidate paths, scores each resulting state with the q-network, picks a
path epsilon-greedily and applies it to the environment.  Transitions go to
a FIFO replay buffer; every ``replay_every`` episodes a few minibatches are
replayed against one-step Bellman targets.
"""

from __future__ import annotations

import logging
import os
import pickle
import tempfile
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gnn_q
from .gnn_q import QNetworkParams
from .graph_core import Topology
from .nn_core import OptimizerState, nesterov_step
from .otn_env import DEFAULT_CAPACITY, EnvState, TrafficDemand, init_env, step, tentative_allocate
from .path_engine import PathTable
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_hold_episodes: int = 10
    epsilon_decay_rate: float = 0.995
    epsilon_decay_every: int = 2
    epsilon_min: float = 0.01
    replay_every: int = 2
    batches_per_replay: int = 5
    batch_size: int = 32
    buffer_size: int = 5000
    k: int = 4
    training_episodes: int = 1000
    eval_period: int = 100
    eval_episodes: int = 50
    hidden: int = 25
    steps: int = 8
    learning_rate: float = 1e-4
    momentum: float = 0.9
    capacity: float = DEFAULT_CAPACITY
    # q-values are learned in units of reward * reward_scale
    reward_scale: float = 1.0
    # global gradient-norm clip per minibatch; 0 disables
    grad_clip: float = 5.0
    # 0 disables the target network: targets use the live parameters
    target_update_period: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.epsilon_min <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if not 0.0 < self.epsilon_decay_rate <= 1.0:
            raise ValueError("epsilon_decay_rate must lie in (0, 1]")
        if self.grad_clip < 0 or self.reward_scale <= 0:
            raise ValueError("need grad_clip >= 0 and reward_scale > 0")
        for name in ("replay_every", "batches_per_replay", "batch_size", "buffer_size", "k", "eval_period", "epsilon_decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "AgentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in values.items():
            if key not in kinds:
                continue
            out[key] = (float if kinds[key] == "float" else int)(val)
        return cls(**out)


@dataclass(frozen=True)
class Transition:
    state: EnvState
    demand: TrafficDemand
    action_rank: int
    reward: float
    next_state: EnvState
    next_demand: TrafficDemand | None
    done: bool


class ReplayBuffer:
    """Bounded FIFO of transitions; the oldest is evicted once full."""

    def __init__(self, capacity: int = 5000):
        self._items: deque[Transition] = deque(maxlen=capacity)

    @property
    def capacity(self) -> int:
        return self._items.maxlen

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def append(self, tr: Transition) -> None:
        self._items.append(tr)

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


def epsilon_at(episode: int, cfg: AgentConfig) -> float:
    if episode < cfg.epsilon_hold_episodes:
        return cfg.epsilon_start
    ticks = (episode - cfg.epsilon_hold_episodes) // cfg.epsilon_decay_every
    return max(cfg.epsilon_min, cfg.epsilon_start * cfg.epsilon_decay_rate**ticks)


def _candidate_inputs(state: EnvState, demand: TrafficDemand, table: PathTable):
    paths = table[(demand.src, demand.dst)]
    if not paths:
        raise ValueError(f"no candidate path for {demand.src}->{demand.dst}")
    return [(tentative_allocate(state, p, demand.bandwidth), demand, p) for p in paths]


def evaluate_actions(
    state: EnvState, demand: TrafficDemand, table: PathTable, params: QNetworkParams
) -> list[tuple[int, float]]:
    """``(rank, q)`` for every candidate path, each scored on its post-allocation state."""
    q = gnn_q.q_values_batch(_candidate_inputs(state, demand, table), params)
    return [(i, float(v)) for i, v in enumerate(q)]


def select_action(q_values: Sequence, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over ``q_values`` (floats or ``(rank, q)`` pairs); ties go to the lowest rank."""
    if not len(q_values):
        raise ValueError("no actions to choose from")
    qs = [v[1] if isinstance(v, tuple) else v for v in q_values]
    if rng.random() < epsilon:
        return int(rng.integers(len(qs)))
    return int(np.argmax(qs))


def bellman_target(tr: Transition, table: PathTable, params: QNetworkParams, gamma: float) -> float:
    if tr.done:
        return tr.reward
    best = max(q for _, q in evaluate_actions(tr.next_state, tr.next_demand, table, params))
    return tr.reward + gamma * best


def bellman_targets(
    batch: Sequence[Transition], table: PathTable, params: QNetworkParams, gamma: float, reward_scale: float = 1.0
) -> np.ndarray:
    """Vectorised :func:`bellman_target` (one forward pass per topology)."""
    targets = reward_scale * np.array([tr.reward for tr in batch], dtype=float)
    inputs, owner = [], []
    for i, tr in enumerate(batch):
        if tr.done or gamma == 0.0:
            continue
        cand = _candidate_inputs(tr.next_state, tr.next_demand, table)
        inputs.extend(cand)
        owner.extend([i] * len(cand))
    if inputs:
        q = _grouped_q(inputs, params)
        best = np.full(len(batch), -np.inf)
        np.maximum.at(best, np.array(owner), q)
        live = np.isfinite(best)
        targets[live] += gamma * best[live]
    return targets


def _grouped_q(items: list, params: QNetworkParams) -> np.ndarray:
    out = np.empty(len(items))
    groups: dict[tuple, list[int]] = {}
    for i, it in enumerate(items):
        t = it[0].topology
        groups.setdefault((t.num_nodes, t.links), []).append(i)
    for idx in groups.values():
        out[idx] = gnn_q.q_values_batch([items[i] for i in idx], params)
    return out


def replay_train(
    buffer: ReplayBuffer,
    params: QNetworkParams,
    opt: OptimizerState,
    cfg: AgentConfig,
    table: PathTable,
    rng: np.random.Generator,
    target_params: QNetworkParams | None = None,
) -> tuple[QNetworkParams, OptimizerState, list[float]]:
    """Replay ``cfg.batches_per_replay`` minibatches; a no-op while the buffer is short."""
    if len(buffer) < cfg.batch_size:
        log.debug("replay skipped: %d transitions < batch size %d", len(buffer), cfg.batch_size)
        return params, opt, []
    losses = []
    for _ in range(cfg.batches_per_replay):
        batch = buffer.sample(rng, cfg.batch_size)
        targets = bellman_targets(batch, table, target_params or params, cfg.gamma, cfg.reward_scale)
        items = []
        for tr, y in zip(batch, targets):
            path = table[(tr.demand.src, tr.demand.dst)][tr.action_rank]
            items.append((tentative_allocate(tr.state, path, tr.demand.bandwidth), tr.demand, path, float(y)))
        grads, loss = gnn_q.q_gradients(items, params)
        if cfg.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        arrays, opt = nesterov_step(opt, params.arrays, grads)
        params = params.replace(arrays)
        losses.append(loss)
    return params, opt, losses


def run_greedy_episode(
    topo: Topology,
    table: PathTable,
    params: QNetworkParams,
    demand_seed,
    capacity: float = DEFAULT_CAPACITY,
    demand_log: list | None = None,
) -> float:
    """Score of one epsilon=0 episode on the demand stream of ``demand_seed``."""
    rng = np.random.default_rng(demand_seed)
    state, demand = init_env(topo, table, rng, capacity)
    score, done = 0.0, False
    while not done:
        if demand_log is not None:
            demand_log.append(demand)
        qs = evaluate_actions(state, demand, table, params)
        rank = int(np.argmax([q for _, q in qs]))
        out = step(state, demand, table[(demand.src, demand.dst)][rank], rng)
        score += out.reward
        state, demand, done = out.next_state, out.next_demand, out.done
    return score


@dataclass
class TrainingState:
    """Everything needed to resume training at an episode boundary."""

    cfg: AgentConfig
    seed: int
    params: QNetworkParams
    opt: OptimizerState
    buffer: ReplayBuffer
    rngs: dict[str, np.random.Generator]
    episode: int = 0
    log: list[dict] = field(default_factory=list)
    best_params: QNetworkParams | None = None
    best_eval: float = -np.inf
    target_params: QNetworkParams | None = None

    @classmethod
    def fresh(cls, cfg: AgentConfig, seed: int) -> "TrainingState":
        streams = np.random.SeedSequence(seed).spawn(4)
        rngs = {name: np.random.default_rng(s) for name, s in zip(("init", "demand", "explore", "replay"), streams)}
        params = QNetworkParams.init(rngs["init"], cfg.hidden, cfg.steps)
        opt = OptimizerState(cfg.learning_rate, cfg.momentum)
        target = params.copy() if cfg.target_update_period else None
        return cls(cfg, seed, params, opt, ReplayBuffer(cfg.buffer_size), rngs, target_params=target)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp, path)

    @staticmethod
    def load(path: str | Path) -> "TrainingState":
        with open(path, "rb") as fh:
            return pickle.load(fh)


@dataclass
class TrainResult:
    best_params: QNetworkParams
    final_params: QNetworkParams
    log: list[dict]
    best_eval: float


LOG_COLUMNS = ("episode", "epsilon", "episode_score", "loss_mean", "eval_mean")


def train(
    topo: Topology,
    table: PathTable,
    cfg: AgentConfig,
    seed: int = 0,
    resume: TrainingState | None = None,
    state_path: str | Path | None = None,
    state_every: int = 50,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the DQN training loop and return the best-evaluated parameters.

    With ``state_path`` a resumable :class:`TrainingState` is written every
    ``state_every`` episodes; pass it back as ``resume`` to continue.
    ``stop_after`` interrupts after that many episodes of this call.
    """
    ts = resume or TrainingState.fresh(cfg, seed)
    cfg = ts.cfg
    eval_seeds = [derive_seed(ts.seed, "train-eval", i) for i in range(cfg.eval_episodes)]
    ran = 0
    while ts.episode < cfg.training_episodes:
        if stop_after is not None and ran >= stop_after:
            break
        ep = ts.episode
        eps = epsilon_at(ep, cfg)
        state, demand = init_env(topo, table, ts.rngs["demand"], cfg.capacity)
        score, done = 0.0, False
        while not done:
            qs = evaluate_actions(state, demand, table, ts.params)
            rank = select_action(qs, eps, ts.rngs["explore"])
            out = step(state, demand, table[(demand.src, demand.dst)][rank], ts.rngs["demand"])
            ts.buffer.append(Transition(state, demand, rank, out.reward, out.next_state, out.next_demand, out.done))
            score += out.reward
            state, demand, done = out.next_state, out.next_demand, out.done

        losses: list[float] = []
        if (ep + 1) % cfg.replay_every == 0:
            ts.params, ts.opt, losses = replay_train(
                ts.buffer, ts.params, ts.opt, cfg, table, ts.rngs["replay"], ts.target_params
            )
        if cfg.target_update_period and (ep + 1) % cfg.target_update_period == 0:
            ts.target_params = ts.params.copy()

        row = {
            "episode": ep,
            "epsilon": eps,
            "episode_score": score,
            "loss_mean": float(np.mean(losses)) if losses else None,
            "eval_mean": None,
        }
        if (ep + 1) % cfg.eval_period == 0:
            mean = float(np.mean([run_greedy_episode(topo, table, ts.params, s, cfg.capacity) for s in eval_seeds]))
            row["eval_mean"] = mean
            log.info("episode %d: eval mean %.1f (epsilon %.3f)", ep, mean, eps)
            if mean > ts.best_eval:
                ts.best_eval = mean
                ts.best_params = ts.params.copy()
        ts.log.append(row)
        ts.episode += 1
        ran += 1
        if state_path is not None and (ts.episode % state_every == 0 or ts.episode == cfg.training_episodes):
            ts.save(state_path)

    best = ts.best_params if ts.best_params is not None else ts.params
    return TrainResult(best, ts.params, ts.log, ts.best_eval)
