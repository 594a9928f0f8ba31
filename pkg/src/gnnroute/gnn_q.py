"""Link-level message-passing network that scores (state, action) pairs.

Every link starts from ``[capacity fraction, betweenness, one-hot action
bandwidth, 0...]``.  For ``T`` rounds each link sums ``m([h_l, h_i])`` over
its neighbour links and feeds the sum to a gated recurrent cell.  The final
link states are summed and mapped to a scalar q-value by the readout stack.

Forward and backward passes are batched over a leading axis of samples that
share one topology.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import nn_core
from .graph_core import Topology
from .nn_core import DenseLayerParams, Params, RecurrentCellParams
from .otn_env import BANDWIDTHS, EnvState, TrafficDemand
from .path_engine import CandidatePath

FEATURE_LAYOUT_VERSION = 1
NUM_FEATURES = 2 + len(BANDWIDTHS)


@dataclass
class QNetworkParams:
    hidden: int = 25
    steps: int = 8
    arrays: Params = field(default_factory=dict)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 25, steps: int = 8) -> "QNetworkParams":
        if hidden < 1 or steps < 1:
            raise ValueError("hidden size and message-passing steps must be positive")
        H = hidden
        m0 = DenseLayerParams.init(rng, 2 * H, H, "selu")
        m1 = DenseLayerParams.init(rng, H, H)
        cell = RecurrentCellParams.init(rng, H)
        r0 = DenseLayerParams.init(rng, H, H, "selu")
        r1 = DenseLayerParams.init(rng, H, 1)
        arrays = {
            "message.0.w": m0.weights,
            "message.0.b": m0.bias,
            "message.1.w": m1.weights,
            "message.1.b": m1.bias,
            "update.w": cell.w,
            "update.u": cell.u,
            "update.b": cell.b,
            "readout.0.w": r0.weights,
            "readout.0.b": r0.bias,
            "readout.1.w": r1.weights,
            "readout.1.b": r1.bias,
        }
        return cls(hidden, steps, arrays)

    def replace(self, arrays: Params) -> "QNetworkParams":
        return QNetworkParams(self.hidden, self.steps, arrays)

    def copy(self) -> "QNetworkParams":
        return self.replace({k: v.copy() for k, v in self.arrays.items()})

    @property
    def message(self) -> tuple[DenseLayerParams, DenseLayerParams]:
        a = self.arrays
        return (
            DenseLayerParams(a["message.0.w"], a["message.0.b"], "selu"),
            DenseLayerParams(a["message.1.w"], a["message.1.b"]),
        )

    @property
    def update(self) -> RecurrentCellParams:
        a = self.arrays
        return RecurrentCellParams(a["update.w"], a["update.u"], a["update.b"])

    @property
    def readout(self) -> tuple[DenseLayerParams, DenseLayerParams]:
        a = self.arrays
        return (
            DenseLayerParams(a["readout.0.w"], a["readout.0.b"], "selu"),
            DenseLayerParams(a["readout.1.w"], a["readout.1.b"]),
        )

    def header(self) -> dict:
        return {
            "kind": "qnetwork",
            "feature_layout": FEATURE_LAYOUT_VERSION,
            "hidden": self.hidden,
            "steps": self.steps,
            "layers": {
                "message": [[2 * self.hidden, self.hidden, "selu"], [self.hidden, self.hidden, "linear"]],
                "update": "gru",
                "readout": [[self.hidden, self.hidden, "selu"], [self.hidden, 1, "linear"]],
            },
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = self.header()
        if extra:
            header["config"] = extra
        nn_core.save_arrays(path, self.arrays, header)

    @classmethod
    def load(cls, path: str | Path) -> "QNetworkParams":
        meta, arrays = nn_core.load_arrays(path)
        if meta.get("kind") != "qnetwork":
            raise nn_core.CheckpointError(f"{path}: not a q-network checkpoint")
        if meta.get("feature_layout") != FEATURE_LAYOUT_VERSION:
            raise nn_core.CheckpointError(
                f"{path}: feature layout {meta.get('feature_layout')} != {FEATURE_LAYOUT_VERSION}"
            )
        params = cls(int(meta["hidden"]), int(meta["steps"]), arrays)
        expected = cls.init(np.random.default_rng(0), params.hidden, params.steps).arrays
        for name, arr in expected.items():
            if name not in arrays or arrays[name].shape != arr.shape:
                raise nn_core.CheckpointError(f"{path}: array {name} missing or mis-shaped")
        return params


@dataclass(frozen=True)
class LinkGraph:
    """Ordered neighbour-link pairs: link ``recv[p]`` gets a message from ``send[p]``."""

    recv: np.ndarray
    send: np.ndarray
    recv_matrix: np.ndarray  # (L, P) one-hot, scatters pair values onto receivers
    send_matrix: np.ndarray  # (L, P) one-hot on senders
    degree: np.ndarray  # (L, 1) neighbour count


@lru_cache(maxsize=128)
def link_graph(topo: Topology) -> LinkGraph:
    pairs = [(l, i) for l, nbrs in enumerate(topo.link_adjacency) for i in nbrs]
    recv = np.array([p[0] for p in pairs], dtype=np.int64)
    send = np.array([p[1] for p in pairs], dtype=np.int64)
    L, P = topo.num_links, len(pairs)
    rm = np.zeros((L, P))
    sm = np.zeros((L, P))
    rm[recv, np.arange(P)] = 1.0
    sm[send, np.arange(P)] = 1.0
    return LinkGraph(recv, send, rm, sm, rm.sum(axis=1, keepdims=True))


def init_hidden_states(state: EnvState, action: CandidatePath, demand: TrafficDemand, hidden: int) -> np.ndarray:
    """Initial ``(L, hidden)`` link states for one (state, action) pair."""
    if hidden < NUM_FEATURES:
        raise ValueError(f"hidden size {hidden} < {NUM_FEATURES} features")
    h = np.zeros((state.topology.num_links, hidden))
    h[:, 0] = state.available / state.max_capacity
    h[:, 1] = state.betweenness
    h[list(action.links), 2 + BANDWIDTHS.index(demand.bandwidth)] = 1.0
    return h


def message_pass(hidden: np.ndarray, topo: Topology, params: QNetworkParams) -> np.ndarray:
    """One synchronous message-passing round on ``(..., L, H)`` link states."""
    return _round_forward(hidden, link_graph(topo), params)[0]


def _round_forward(h: np.ndarray, g: LinkGraph, params: QNetworkParams):
    # m([h_l, h_i]) = W1 selu(Wa h_l + Wb h_i + b0) + b1.  The first layer is
    # evaluated per link and gathered onto pairs; the linear second layer is
    # applied after the neighbour sum, adding b1 once per neighbour.
    H = params.hidden
    a = params.arrays
    w0, w1 = a["message.0.w"], a["message.1.w"]
    proj_recv = nn_core._affine(h, w0[:, :H])
    proj_send = nn_core._affine(h, w0[:, H:])
    pre = proj_recv[..., g.recv, :] + proj_send[..., g.send, :] + a["message.0.b"]
    act = nn_core.selu(pre)
    summed = g.recv_matrix @ act
    agg = nn_core._affine(summed, w1) + g.degree * a["message.1.b"]
    out, cg = nn_core.recurrent_forward(params.update, h, agg)
    return out, (h, pre, summed, cg)


def _round_backward(dout: np.ndarray, cache: tuple, g: LinkGraph, params: QNetworkParams, acc: Params) -> np.ndarray:
    h, pre, summed, cg = cache
    H = params.hidden
    a = params.arrays
    w0, w1 = a["message.0.w"], a["message.1.w"]
    dh, dagg, dW, dU, db = nn_core.recurrent_backward(params.update, cg, dout)
    acc["update.w"] += dW
    acc["update.u"] += dU
    acc["update.b"] += db
    dagg2 = dagg.reshape(-1, H)
    acc["message.1.w"] += dagg2.T @ summed.reshape(-1, H)
    acc["message.1.b"] += (dagg * g.degree).reshape(-1, H).sum(axis=0)
    dsummed = nn_core._affine(dagg, w1.T)
    dpre = dsummed[..., g.recv, :] * nn_core.selu_grad(pre)
    acc["message.0.b"] += dpre.reshape(-1, H).sum(axis=0)
    dproj_recv = g.recv_matrix @ dpre
    dproj_send = g.send_matrix @ dpre
    h2 = h.reshape(-1, H)
    acc["message.0.w"][:, :H] += dproj_recv.reshape(-1, H).T @ h2
    acc["message.0.w"][:, H:] += dproj_send.reshape(-1, H).T @ h2
    return dh + nn_core._affine(dproj_recv, w0[:, :H].T) + nn_core._affine(dproj_send, w0[:, H:].T)


def forward(h0: np.ndarray, topo: Topology, params: QNetworkParams) -> tuple[np.ndarray, tuple]:
    """q-values for a ``(B, L, H)`` stack of initial link states."""
    g = link_graph(topo)
    h = h0
    rounds = []
    for _ in range(params.steps):
        h, cache = _round_forward(h, g, params)
        rounds.append(cache)
    r = h.sum(axis=-2)
    r0, r1 = params.readout
    o1, cr0 = nn_core.dense_forward(r0, r)
    q, cr1 = nn_core.dense_forward(r1, o1)
    return q[..., 0], (g, rounds, cr0, cr1, h.shape)


def backward(dq: np.ndarray, cache: tuple, params: QNetworkParams) -> Params:
    """Parameter gradients of ``sum(dq * q)`` for the forward pass in ``cache``."""
    g, rounds, cr0, cr1, hshape = cache
    r0, r1 = params.readout
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    do1, dw, db = nn_core.dense_backward(r1, cr1, dq[..., None])
    grads["readout.1.w"] += dw
    grads["readout.1.b"] += db
    dr, dw, db = nn_core.dense_backward(r0, cr0, do1)
    grads["readout.0.w"] += dw
    grads["readout.0.b"] += db
    dh = np.broadcast_to(dr[..., None, :], hshape)
    for cache_t in reversed(rounds):
        dh = _round_backward(dh, cache_t, g, params, grads)
    return grads


def q_value(state: EnvState, demand: TrafficDemand, action: CandidatePath, params: QNetworkParams) -> float:
    if action.src != demand.src or action.dst != demand.dst:
        raise ValueError("action does not connect the demand endpoints")
    h0 = init_hidden_states(state, action, demand, params.hidden)
    q, _ = forward(h0[None], state.topology, params)
    return float(q[0])


def q_values_batch(
    items: list[tuple[EnvState, TrafficDemand, CandidatePath]], params: QNetworkParams
) -> np.ndarray:
    """q-values for many (state, demand, action) triples on one topology."""
    if not items:
        return np.zeros(0)
    topo = items[0][0].topology
    h0 = np.stack([init_hidden_states(s, a, d, params.hidden) for s, d, a in items])
    return forward(h0, topo, params)[0]


def q_gradients(
    batch: list[tuple[EnvState, TrafficDemand, CandidatePath, float]], params: QNetworkParams
) -> tuple[Params, float]:
    """Mean squared error ``mean((q - target)^2)`` and its parameter gradients."""
    if not batch:
        raise ValueError("empty batch")
    groups: dict[tuple, list[int]] = {}
    for i, item in enumerate(batch):
        t = item[0].topology
        # keyed by structure: an unpickled replay buffer holds equal but distinct Topology objects
        groups.setdefault((t.num_nodes, t.links), []).append(i)
    n = len(batch)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    loss = 0.0
    for idx in groups.values():
        topo = batch[idx[0]][0].topology
        h0 = np.stack([init_hidden_states(batch[i][0], batch[i][2], batch[i][1], params.hidden) for i in idx])
        targets = np.array([batch[i][3] for i in idx], dtype=float)
        q, cache = forward(h0, topo, params)
        err = q - targets
        loss += float(err @ err)
        for k, v in backward(2.0 * err / n, cache, params).items():
            grads[k] += v
    return grads, loss / n
