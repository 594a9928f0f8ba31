"""Small numpy neural-network toolkit with hand-written reverse mode.

Only what the q-network needs: affine layers with SELU or linear output, a
GRU-style gated recurrent cell, Nesterov-momentum SGD, a central-difference
gradient checker and a flat binary checkpoint container.  Everything runs in
float64.  Inputs may carry any number of leading batch dimensions.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

Params = dict[str, np.ndarray]


def selu(x: np.ndarray) -> np.ndarray:
    neg = np.minimum(x, 0.0)
    return SELU_SCALE * (x - neg + SELU_ALPHA * np.expm1(neg))


def selu_grad(x: np.ndarray) -> np.ndarray:
    return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    # one 2-D GEMM instead of numpy's batched-matmul loop
    out = x.reshape(-1, x.shape[-1]) @ w.T
    if b is not None:
        out += b
    return out.reshape(*x.shape[:-1], w.shape[0])


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------------------------------------------------------------- dense layers


@dataclass
class DenseLayerParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ("linear", "selu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent dense shapes {self.weights.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, activation: str = "linear"):
        return cls(glorot_uniform(rng, out_dim, in_dim), np.zeros(out_dim), activation)


def dense_forward(p: DenseLayerParams, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"dense input has width {x.shape[-1]}, expected {p.in_dim}")
    pre = _affine(x, p.weights, p.bias)
    out = selu(pre) if p.activation == "selu" else pre
    return out, (x, pre)


def dense_apply(p: DenseLayerParams, x: np.ndarray) -> np.ndarray:
    return dense_forward(p, x)[0]


def dense_backward(p: DenseLayerParams, cache: tuple, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(dx, dW, db)``; parameter grads are summed over batch dims."""
    x, pre = cache
    dpre = dout * selu_grad(pre) if p.activation == "selu" else dout
    d2 = dpre.reshape(-1, p.out_dim)
    x2 = x.reshape(-1, p.in_dim)
    return (d2 @ p.weights).reshape(x.shape), d2.T @ x2, d2.sum(axis=0)


# ------------------------------------------------------------ recurrent cell


@dataclass
class RecurrentCellParams:
    """Gated recurrent cell, gates stacked as (update, reset, candidate).

    z = sigmoid(Wz x + Uz h + bz)
    r = sigmoid(Wr x + Ur h + br)
    n = tanh(Wn x + Un (r * h) + bn)
    h' = (1 - z) * n + z * h
    """

    w: np.ndarray  # (3H, H) input weights
    u: np.ndarray  # (3H, H) recurrent weights
    b: np.ndarray  # (3H,)

    def __post_init__(self):
        h = self.w.shape[1]
        if self.w.shape != (3 * h, h) or self.u.shape != (3 * h, h) or self.b.shape != (3 * h,):
            raise ValueError("recurrent cell shapes must be (3H,H), (3H,H), (3H,)")

    @property
    def hidden_size(self) -> int:
        return self.w.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int):
        w = np.concatenate([glorot_uniform(rng, hidden, hidden) for _ in range(3)])
        u = np.concatenate([glorot_uniform(rng, hidden, hidden) for _ in range(3)])
        return cls(w, u, np.zeros(3 * hidden))


def recurrent_forward(p: RecurrentCellParams, hidden: np.ndarray, inp: np.ndarray) -> tuple[np.ndarray, tuple]:
    H = p.hidden_size
    if hidden.shape[-1] != H or inp.shape[-1] != H:
        raise ValueError(f"recurrent cell expects width {H}, got {hidden.shape[-1]} and {inp.shape[-1]}")
    gx = _affine(inp, p.w, p.b)
    gh = _affine(hidden, p.u[: 2 * H])
    z = sigmoid(gx[..., :H] + gh[..., :H])
    r = sigmoid(gx[..., H : 2 * H] + gh[..., H:])
    rh = r * hidden
    n = np.tanh(gx[..., 2 * H :] + _affine(rh, p.u[2 * H :]))
    out = (1.0 - z) * n + z * hidden
    return out, (hidden, inp, z, r, n, rh)


def recurrent_update(p: RecurrentCellParams, hidden: np.ndarray, inp: np.ndarray) -> np.ndarray:
    return recurrent_forward(p, hidden, inp)[0]


def recurrent_backward(p: RecurrentCellParams, cache: tuple, dout: np.ndarray):
    """Returns ``(dhidden, dinput, dW, dU, db)``."""
    hidden, inp, z, r, n, rh = cache
    H = p.hidden_size
    dz = dout * (hidden - n)
    dn = dout * (1.0 - z)
    dh = dout * z
    dan = dn * (1.0 - n * n)
    drh = _affine(dan, p.u[2 * H :].T)
    dh = dh + drh * r
    dar = drh * hidden * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dh = dh + _affine(np.concatenate([daz, dar], axis=-1), p.u[: 2 * H].T)
    da = np.concatenate([daz, dar, dan], axis=-1)
    dinp = _affine(da, p.w.T)

    da2 = da.reshape(-1, 3 * H)
    dW = da2.T @ inp.reshape(-1, H)
    dU = np.concatenate(
        [
            da2[:, : 2 * H].T @ hidden.reshape(-1, H),
            da2[:, 2 * H :].T @ rh.reshape(-1, H),
        ]
    )
    return dh, dinp, dW, dU, da2.sum(axis=0)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    velocity: Params = field(default_factory=dict)


def nesterov_step(opt: OptimizerState, params: Params, grads: Params) -> tuple[Params, OptimizerState]:
    """One SGD step with Nesterov momentum.

    The variant used (as in Keras/TF ``SGD(nesterov=True)``)::

        v     <- mu * v - lr * g
        theta <- theta + mu * v - lr * g

    With ``mu = 0`` this is plain SGD.  Returns new arrays; inputs are untouched.
    """
    mu, lr = opt.momentum, opt.learning_rate
    new_params, new_vel = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        v = mu * opt.velocity.get(name, np.zeros_like(theta)) - lr * g
        new_vel[name] = v
        new_params[name] = theta + mu * v - lr * g
    return new_params, OptimizerState(lr, mu, new_vel)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_diff_check(
    loss_fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    ``loss_fn(params)`` returns ``(loss, grads)``.  The error of a block is
    ``|g_analytic - g_numeric| / (|g_analytic| + |g_numeric|)`` in the 2-norm
    (0 when both vanish).
    """
    _, analytic = loss_fn(params)
    errors = {}
    for name, theta in params.items():
        numeric = np.zeros_like(theta)
        flat = numeric.reshape(-1)
        for i in range(theta.size):
            probe = {k: v for k, v in params.items()}
            plus = theta.copy().reshape(-1)
            plus[i] += step
            probe[name] = plus.reshape(theta.shape)
            lp = loss_fn(probe)[0]
            minus = theta.copy().reshape(-1)
            minus[i] -= step
            probe[name] = minus.reshape(theta.shape)
            lm = loss_fn(probe)[0]
            flat[i] = (lp - lm) / (2 * step)
        a = analytic[name]
        denom = np.linalg.norm(a) + np.linalg.norm(numeric)
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(a - numeric) / denom)
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = "GNNROUTE-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Params, header: dict) -> None:
    """Write a checkpoint atomically.

    Layout: a magic/version line, one line of JSON header (which lists array
    names and shapes in storage order), then the arrays as little-endian
    float64 in that order.
    """
    path = Path(path)
    meta = dict(header)
    meta["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    head = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{json.dumps(meta, sort_keys=True)}\n".encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(head)
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str | Path) -> tuple[dict, Params]:
    data = Path(path).read_bytes()
    try:
        first, second, body = data.split(b"\n", 2)
        magic, version = first.decode().split()
        meta = json.loads(second)
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a checkpoint") from exc
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {first!r}")
    arrays, offset = {}, 0
    for spec in meta.pop("arrays"):
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return meta, arrays
