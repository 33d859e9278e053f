"""Small reverse-mode autodiff over numpy arrays, MLPs, Adam and checkpoints.

Only the primitives the score models need are provided. Every value is a
float64 ``Tensor``; operations record their parents and a backward closure,
and :func:`backward` walks the resulting graph in reverse topological order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- primitives -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward=bw, op="add")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward=bw, op="mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)

    return Tensor(a.data * c, parents=(a,), backward=bw, op="scale")


def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-d operands and stacked (batched) 3-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, parents=(a, b), backward=bw, op="matmul")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, parents=(a,), backward=bw, op="tanh")


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * a.data,)

    return Tensor(a.data * a.data, parents=(a,), backward=bw, op="square")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(out, parents=(a,), backward=bw, op="sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return Tensor(a.data.reshape(shape), parents=(a,), backward=bw, op="reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(np.swapaxes(a.data, -1, -2), parents=(a,), backward=bw, op="transpose")


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=bw,
        op="concat",
    )


def take(a: Tensor, index, axis=0) -> Tensor:
    """Slice ``a`` along ``axis`` with a slice object or integer index array."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, sl, g)
        return (out,)

    return Tensor(a.data[sl], parents=(a,), backward=bw, op="take")


# -- reverse pass -------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate d(loss)/d(node) into ``.grad`` for every node on the tape.

    Returns the list of gradients for ``params`` (zeros for parameters the loss
    does not depend on) when ``params`` is given.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    if params is None:
        return None
    on_tape = {id(n) for n in order}
    return [
        p.grad if id(p) in on_tape and p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]


def numerical_gradient(f, arrays, h=1e-6):
    """Central differences of scalar ``f(arrays)`` w.r.t. every entry of every array."""
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f(arrays)
            flat[i] = keep - h
            dn = f(arrays)
            flat[i] = keep
            gflat[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


# -- MLP ----------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights ``(D_out, D_in)`` and biases ``(D_out,)``; tanh between layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, zero=False) -> "MlpParams":
        """Glorot-uniform weights and zero biases for layer widths ``sizes``."""
        weights, biases = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                w = np.zeros((d_out, d_in))
            else:
                lim = np.sqrt(6.0 / (d_in + d_out))
                w = rng.uniform(-lim, lim, size=(d_out, d_in))
            weights.append(w)
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass; ``x`` is ``(D,)`` or ``(B, D)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != network input {params.in_dim}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
    return h


def mlp_forward_tape(leaves: list[Tensor], x) -> Tensor:
    """Taped forward pass over parameter leaves ``[W0, b0, W1, b1, ...]``."""
    h = as_tensor(x)
    n = len(leaves) // 2
    if h.shape[-1] != leaves[0].shape[1]:
        raise ShapeError(f"input dim {h.shape[-1]} != network input {leaves[0].shape[1]}")
    for i in range(n):
        h = add(matmul(h, transpose(leaves[2 * i])), leaves[2 * i + 1])
        if i < n - 1:
            h = tanh(h)
    return h


def leaves_of(params: MlpParams) -> list[Tensor]:
    return [Tensor(a, requires_grad=True) for a in params.arrays()]


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, arrays, lr=1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], lr, **kw)


def adam_step(arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns new arrays; ``state`` is updated in place."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# -- checkpoint ---------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..7    magic b"HOSMCKPT"
#   bytes 8..11   uint32 format version (currently 1)
#   bytes 12..19  uint64 header length H
#   next H bytes  UTF-8 JSON header, keys sorted:
#                   {"meta": {...}, "networks": [{"name": str, "sizes": [int, ...]}, ...]}
#   remainder     float64 little-endian values. For each network in header order,
#                 for each layer: weight (D_out x D_in, row-major) then bias (D_out).

MAGIC = b"HOSMCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, networks: dict[str, MlpParams], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "networks": [{"name": k, "sizes": v.sizes} for k, v in networks.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for net in networks.values():
            for a in net.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[20 + hlen :], dtype="<f8").astype(DTYPE)
    pos = 0
    nets = {}
    for spec in header["networks"]:
        sizes = spec["sizes"]
        ws, bs = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            ws.append(values[pos : pos + d_in * d_out].reshape(d_out, d_in).copy())
            pos += d_in * d_out
            bs.append(values[pos : pos + d_out].copy())
            pos += d_out
        nets[spec["name"]] = MlpParams(ws, bs)
    if pos != values.size:
        raise ValueError(f"{path}: {values.size - pos} trailing values")
    return nets, header["meta"]
