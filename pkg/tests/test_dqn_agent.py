from collections import Counter

import numpy as np
import pytest

from gnnroute import gnn_q
from gnnroute.dqn_agent import (
    AgentConfig,
    ReplayBuffer,
    TrainingState,
    Transition,
    bellman_target,
    bellman_targets,
    epsilon_at,
    evaluate_actions,
    replay_train,
    select_action,
    train,
)
from gnnroute.gnn_q import QNetworkParams
from gnnroute.graph_core import builtin_topology
from gnnroute.nn_core import OptimizerState
from gnnroute.otn_env import TrafficDemand, initial_state, tentative_allocate
from gnnroute.path_engine import build_path_table
from helpers import path_graph, ring, triangle


@pytest.fixture(scope="module")
def nsfnet():
    topo = builtin_topology("nsfnet")
    return topo, build_path_table(topo, 4)


def small_params(seed=0, hidden=6, steps=2):
    return QNetworkParams.init(np.random.default_rng(seed), hidden, steps)


def test_evaluate_actions_scores_every_candidate(nsfnet):
    topo, table = nsfnet
    state = initial_state(topo, table)
    qs = evaluate_actions(state, TrafficDemand(0, 13, 32), table, small_params())
    assert [r for r, _ in qs] == [0, 1, 2, 3]
    assert all(np.isfinite(q) for _, q in qs)


def test_evaluate_actions_uses_post_allocation_state(nsfnet):
    topo, table = nsfnet
    state = initial_state(topo, table)
    d = TrafficDemand(2, 9, 64)
    params = small_params(1)
    for rank, q in evaluate_actions(state, d, table, params):
        path = table[(2, 9)][rank]
        assert q == pytest.approx(gnn_q.q_value(tentative_allocate(state, path, 64), d, path, params), rel=1e-12)


def test_symmetric_candidates_get_equal_q():
    # on a 4-ring both routes between opposite nodes are images of each other
    topo = ring(4)
    table = build_path_table(topo, 2)
    qs = evaluate_actions(initial_state(topo, table), TrafficDemand(0, 2, 8), table, small_params(2))
    assert qs[0][1] == pytest.approx(qs[1][1], rel=1e-9)


def test_select_action_greedy_and_ties():
    rng = np.random.default_rng(0)
    assert select_action([1.0, 5.0, 3.0, 2.0], 0.0, rng) == 1
    assert select_action([2.0, 2.0, 1.0], 0.0, rng) == 0
    assert select_action([(0, 0.1), (1, 0.7)], 0.0, rng) == 1
    with pytest.raises(ValueError):
        select_action([], 0.5, rng)


def test_select_action_epsilon_frequencies():
    rng = np.random.default_rng(1)
    counts = Counter(select_action([0.0, 0.0, 9.0, 0.0], 0.4, rng) for _ in range(10_000))
    # greedy share: 0.6 + 0.4 / 4 = 0.7, others 0.1 each
    assert abs(counts[2] / 10_000 - 0.7) < 0.02
    for a in (0, 1, 3):
        assert abs(counts[a] / 10_000 - 0.1) < 0.015


def test_epsilon_schedule():
    cfg = AgentConfig()
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(9, cfg) == 1.0
    assert epsilon_at(10, cfg) == 1.0
    assert epsilon_at(12, cfg) == pytest.approx(0.995)
    assert epsilon_at(13, cfg) == pytest.approx(0.995)
    assert epsilon_at(110, cfg) == pytest.approx(0.995**50)
    assert epsilon_at(10**6, cfg) == 0.01
    values = [epsilon_at(e, cfg) for e in range(3000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_config_validation_and_mapping():
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.5)
    with pytest.raises(ValueError):
        AgentConfig(batch_size=0)
    cfg = AgentConfig.from_mapping({"gamma": "0.5", "batch_size": "8", "unknown": "x"})
    assert cfg.gamma == 0.5 and cfg.batch_size == 8


def make_transition(topo, table, reward, done, bw=8, src=0, dst=1):
    state = initial_state(topo, table)
    d = TrafficDemand(src, dst, bw)
    nxt = tentative_allocate(state, table[(src, dst)][0], bw)
    return Transition(state, d, 0, reward, nxt, None if done else TrafficDemand(dst, src, bw), done)


def test_bellman_target_terminal():
    topo = triangle()
    table = build_path_table(topo)
    tr = make_transition(topo, table, 0.0, True)
    assert bellman_target(tr, table, small_params(), 0.95) == 0.0


def test_bellman_target_uses_max_next_q():
    topo = triangle()
    table = build_path_table(topo)
    tr = make_transition(topo, table, 32.0, False, bw=32)
    params = small_params(3)
    best = max(q for _, q in evaluate_actions(tr.next_state, tr.next_demand, table, params))
    assert bellman_target(tr, table, params, 0.95) == pytest.approx(32.0 + 0.95 * best, rel=1e-12)
    assert bellman_target(tr, table, params, 0.0) == 32.0


def test_bellman_target_constant_network():
    # zero readout weights with output bias 10 give q = 10 everywhere: 8 + 0.95 * 10 = 17.5
    topo = triangle()
    table = build_path_table(topo)
    params = small_params(4)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    arrays["readout.1.w"][:] = 0.0
    arrays["readout.1.b"][:] = 10.0
    params = params.replace(arrays)
    tr = make_transition(topo, table, 8.0, False)
    assert bellman_target(tr, table, params, 0.95) == pytest.approx(17.5, abs=1e-12)


def test_vectorised_targets_match_scalar(nsfnet):
    topo, table = nsfnet
    params = small_params(5)
    batch = [make_transition(topo, table, r, d, src=s, dst=t) for r, d, s, t in [(8, False, 0, 5), (0, True, 3, 4), (64, False, 12, 2)]]
    vec = bellman_targets(batch, table, params, 0.95)
    for tr, y in zip(batch, vec):
        assert y == pytest.approx(bellman_target(tr, table, params, 0.95), rel=1e-12)


def test_replay_buffer_fifo():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.append(i)
    assert list(buf) == [2, 3, 4] and len(buf) == 3 and buf.capacity == 3
    picks = buf.sample(np.random.default_rng(0), 1000)
    assert set(picks) == {2, 3, 4}


def test_replay_skipped_when_buffer_short():
    topo = triangle()
    table = build_path_table(topo)
    buf = ReplayBuffer(100)
    for _ in range(31):
        buf.append(make_transition(topo, table, 8.0, False))
    params = small_params()
    opt = OptimizerState()
    out, opt2, losses = replay_train(buf, params, opt, AgentConfig(), table, np.random.default_rng(0))
    assert out is params and opt2 is opt and losses == []


def test_replay_deterministic():
    topo = triangle()
    table = build_path_table(topo)
    buf = ReplayBuffer(100)
    for i in range(40):
        buf.append(make_transition(topo, table, 8.0 * (i % 3), i % 3 == 0))
    cfg = AgentConfig(hidden=6, steps=2)
    runs = [replay_train(buf, small_params(), OptimizerState(), cfg, table, np.random.default_rng(7)) for _ in range(2)]
    for k in runs[0][0].arrays:
        assert np.array_equal(runs[0][0].arrays[k], runs[1][0].arrays[k])
    assert runs[0][2] == runs[1][2]


def test_terminal_only_replay_drives_q_to_zero():
    topo = path_graph(3)
    table = build_path_table(topo)
    buf = ReplayBuffer(64)
    for _ in range(64):
        buf.append(make_transition(topo, table, 0.0, True))
    params = small_params(6)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    arrays["readout.1.b"][:] = 5.0
    params = params.replace(arrays)
    cfg = AgentConfig(hidden=6, steps=2, learning_rate=1e-3)
    opt = OptimizerState(cfg.learning_rate, cfg.momentum)
    tr = buf[0]
    path = table[(0, 1)][0]
    q0 = abs(gnn_q.q_value(tentative_allocate(tr.state, path, 8), tr.demand, path, params))
    rng = np.random.default_rng(0)
    for _ in range(50):
        params, opt, _ = replay_train(buf, params, opt, cfg, table, rng)
    q1 = abs(gnn_q.q_value(tentative_allocate(tr.state, path, 8), tr.demand, path, params))
    assert q1 < 0.1 * q0


def tiny_cfg(**kw):
    base = dict(hidden=6, steps=2, training_episodes=6, eval_period=3, eval_episodes=2, batch_size=8, batches_per_replay=1)
    base.update(kw)
    return AgentConfig(**base)


def test_train_deterministic_and_scores_are_bandwidth_sums():
    topo = ring(5)
    table = build_path_table(topo, 2)
    a = train(topo, table, tiny_cfg(), seed=3)
    b = train(topo, table, tiny_cfg(), seed=3)
    assert a.log == b.log
    for k in a.final_params.arrays:
        assert np.array_equal(a.final_params.arrays[k], b.final_params.arrays[k])
    assert all(r["episode_score"] % 8 == 0 for r in a.log)
    assert [r["eval_mean"] is not None for r in a.log] == [False, False, True, False, False, True]


def test_train_resume_matches_uninterrupted(tmp_path):
    topo = ring(5)
    table = build_path_table(topo, 2)
    full = train(topo, table, tiny_cfg(), seed=4)
    # the reloaded buffer holds equal but distinct Topology objects; results must not care
    for stop in range(1, 6):
        path = tmp_path / f"state{stop}.pkl"
        train(topo, table, tiny_cfg(), seed=4, state_path=path, state_every=1, stop_after=stop)
        resumed = train(topo, table, tiny_cfg(), resume=TrainingState.load(path))
        assert resumed.log == full.log
        for k in full.best_params.arrays:
            assert np.array_equal(resumed.best_params.arrays[k], full.best_params.arrays[k])
