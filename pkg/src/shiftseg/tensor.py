"""Dense float64 tensors with reverse-mode differentiation.

Deliberately minimal: just the ops the training pipeline needs, on a
single-use tape. Ops record backward closures when any input requires
gradients; `backward` consumes the recorded subgraph in reverse creation
order and clears it. `stop_gradient` and `straight_through` provide the
detach / passthrough semantics the quantization objective relies on.
"""
from __future__ import annotations

import itertools
import math
import struct
from typing import Callable, Iterable, Mapping

import numpy as np

from . import _kernels

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # graph-building sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    # equal shapes, or one operand's shape is a trailing suffix of the other's
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not equal or leading-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bwd, "mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _record(a.data * s, (a,), bwd, "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bwd, "matmul")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = _kernels.leaky_fwd(xd, slope)

    def bwd(g):
        return (_kernels.leaky_bwd(xd, g, slope),)

    return _record(out, (x,), bwd, "leaky-relu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bwd(g):
        return (np.where(pos, g, 0.0),)

    return _record(np.where(pos, x.data, 0.0), (x,), bwd, "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), bwd, "tanh")


def softmax(x) -> Tensor:
    """Softmax over the last axis, numerically stable."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (x,), bwd, "softmax")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _record(np.log(xd), (x,), bwd, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (x,), bwd, "exp")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def bwd(g):
        return (2.0 * g * xd,)

    return _record(xd * xd, (x,), bwd, "square")


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(x.data.sum(axis=axis), (x,), bwd, "sum")


def tmean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _record(x.data.mean(axis=axis), (x,), bwd, "mean")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: need at least one input")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bwd, "concat")


def gather_rows(x, indices) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather-rows: indices must be 1-D, got shape {idx.shape}")
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(x.data[idx], (x,), bwd, "gather-rows")


def masked_select(x, mask) -> Tensor:
    """Select rows (axis 0) where mask is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (x.data.shape[0],):
        raise ShapeError(f"masked-select: mask shape {m.shape} does not match rows {x.data.shape[0]}")
    shape = x.data.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[m] = g
        return (gx,)

    return _record(x.data[m], (x,), bwd, "masked-select")


def stop_gradient(x) -> Tensor:
    """Forward identity; contributes zero gradient upstream."""
    x = as_tensor(x)
    return Tensor(x.data, _op="stop-gradient")


def straight_through(forward_value, passthrough_source) -> Tensor:
    """Forward returns `forward_value`; backward routes all gradient to
    `passthrough_source` and none to `forward_value`."""
    fwd, src = as_tensor(forward_value), as_tensor(passthrough_source)
    if fwd.data.shape != src.data.shape:
        raise ShapeError(
            f"straight-through: shapes {fwd.data.shape} and {src.data.shape} must match")

    def bwd(g):
        return (g,)

    return _record(fwd.data, (src,), bwd, "straight-through")


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    The traversed part of the tape is cleared afterwards; a graph cannot be
    replayed. Other, unconsumed graphs sharing tensors are unaffected.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    # collect the ancestor subgraph
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)

    grads: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=np.float64)}
    for node in order:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
    # single-use tape: release the consumed subgraph
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# Optimizers


class Optimizer:
    """SGD-with-momentum or Adam over a named parameter dict."""

    KINDS = ("sgd-momentum", "adam")

    def __init__(self, params: Mapping[str, Tensor], kind: str = "sgd-momentum",
                 lr: float = 0.1, weight_decay: float = 0.0, momentum: float = 0.9,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.params = dict(params)
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        if kind == "adam":
            self.buffers2 = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return math.sqrt(total)

    def step(self) -> None:
        """Apply one update from the accumulated gradients, then zero them."""
        self.t += 1
        clip = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                clip = self.max_grad_norm / norm
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.isnan(g).any():
                raise GradientError(f"NaN gradient in parameter {name!r}")
            if clip != 1.0:
                g = g * clip
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.kind == "sgd-momentum":
                buf = self.buffers[name]
                buf *= self.momentum
                buf += g
                p.data -= self.lr * buf
            else:
                m = self.buffers[name]
                v = self.buffers2[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                mh = m / (1.0 - self.beta1 ** self.t)
                vh = v / (1.0 - self.beta2 ** self.t)
                p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Moment buffers as named arrays for checkpointing."""
        out = {f"{prefix}.m.{n}": b.copy() for n, b in self.buffers.items()}
        if self.kind == "adam":
            out.update({f"{prefix}.v.{n}": b.copy() for n, b in self.buffers2.items()})
        out[f"{prefix}.t"] = np.array([float(self.t)])
        return out

    def load_state_arrays(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> None:
        for n in self.buffers:
            self.buffers[n][...] = arrays[f"{prefix}.m.{n}"]
        if self.kind == "adam":
            for n in self.buffers2:
                self.buffers2[n][...] = arrays[f"{prefix}.v.{n}"]
        self.t = int(arrays[f"{prefix}.t"][0])


# ---------------------------------------------------------------------------
# Checkpoint format: magic "A3WT", then per parameter (sorted by name):
#   uint32 name length | name bytes (utf-8) | uint32 rank | rank x uint64 dims
#   | little-endian float64 values

_MAGIC = b"A3WT"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {blob[:4]!r}")
    out: dict[str, np.ndarray] = {}
    off = 4
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > total:
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < total:
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    return out
