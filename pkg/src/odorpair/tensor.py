"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records its inputs and a backward closure on the output tensor.
Tensors carry a creation sequence number, so the reverse of creation order
is a valid topological order for the backward sweep (the "tape").

Op shape table (``N`` rows, ``D`` columns unless noted):

    ==================  =============================================  =========
    op                  inputs                                         output
    ==================  =============================================  =========
    add/sub/mul/div     numpy-broadcastable shapes                     broadcast
    matmul              (N, K) @ (K, D)                                (N, D)
    concat              tensors equal except on ``axis``              joined
    x[index]            basic slicing / integer arrays                 sliced
    gather_rows         (N, D), idx (M,)                               (M, D)
    scatter_add_rows    (M, D), idx (M,), n_rows                       (n_rows, D)
    relu/sigmoid/tanh   any                                            same
    exp/log             any                                            same
    softmax_rows        (N, D)                                         (N, D)
    segment_softmax     (N,), seg (N,), n_segments                     (N,)
    mean_rows/sum_rows  (N, D)                                         (1, D)
    sum                 any, optional axis                             reduced
    broadcast           any, target shape                              target
    reshape             any                                            any
    indexed_matvec      mats (U, D, K), idx (E,), vecs (E, K)          (E, D)
    bce_with_logits     logits (N, L), targets (N, L), weights (L,)    scalar
    ==================  =============================================  =========
"""

from __future__ import annotations

import contextlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonScalarLoss",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "gather_rows",
    "scatter_add_rows",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax_rows",
    "segment_softmax",
    "mean_rows",
    "sum_rows",
    "tsum",
    "broadcast",
    "reshape",
    "indexed_matvec",
    "bce_with_logits",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "ScheduleConfig",
    "lr_schedule",
    "save_checkpoint",
    "load_checkpoint",
]

_seq = itertools.count()
_grad_enabled = True


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes) -> None:
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


class NonScalarLoss(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)
        self._consumed = False
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731

    def __getitem__(self, index) -> "Tensor":
        return _index(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], Sequence], op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        out = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


def _index(x: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), back, "slice")


def gather_rows(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeMismatch("gather_rows", x.shape, idx.shape)
    n = x.shape[0]
    return _make(x.data[idx], (x,), lambda g: (_scatter(g, idx, n),), "gather_rows")


def _scatter(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values)
    return out


def scatter_add_rows(x, idx, n_rows: int) -> Tensor:
    """Row ``i`` of the output is the sum of rows ``j`` of ``x`` with ``idx[j] == i``."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],) or (idx.size and (idx.min() < 0 or idx.max() >= n_rows)):
        raise ShapeMismatch("scatter_add_rows", x.shape, idx.shape)
    return _make(_scatter(x.data, idx, n_rows), (x,), lambda g: (g[idx],), "scatter_add_rows")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("softmax_rows", x.shape)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),), "softmax_rows")


def segment_softmax(x, seg, n_segments: int) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    x = _as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    if x.ndim != 1 or seg.shape != x.shape:
        raise ShapeMismatch("segment_softmax", x.shape, seg.shape)
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, seg, x.data)
    e = np.exp(x.data - mx[seg])
    tot = np.zeros(n_segments)
    np.add.at(tot, seg, e)
    s = e / tot[seg]

    def back(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, g * s)
        return (s * (g - dot[seg]),)

    return _make(s, (x,), back, "segment_softmax")


def sum_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("sum_rows", x.shape)
    n = x.shape[0]
    return _make(x.data.sum(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=0),), "sum_rows")


def mean_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatch("mean_rows", x.shape)
    n = x.shape[0]
    return _make(
        x.data.mean(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g / n, n, axis=0),), "mean_rows"
    )


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back, "sum")


def broadcast(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch("broadcast", x.shape, shape) from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, shape) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def indexed_matvec(mats, idx, vecs) -> Tensor:
    """``out[e] = mats[idx[e]] @ vecs[e]``; used for edge-conditioned messages."""
    mats, vecs = _as_tensor(mats), _as_tensor(vecs)
    idx = np.asarray(idx, dtype=np.int64)
    if (
        mats.ndim != 3
        or vecs.ndim != 2
        or idx.shape != (vecs.shape[0],)
        or mats.shape[2] != vecs.shape[1]
        or (idx.size and (idx.min() < 0 or idx.max() >= mats.shape[0]))
    ):
        raise ShapeMismatch("indexed_matvec", mats.shape, vecs.shape)
    groups = [np.flatnonzero(idx == u) for u in range(mats.shape[0])]
    out = np.zeros((vecs.shape[0], mats.shape[1]))
    for u, rows in enumerate(groups):
        if rows.size:
            out[rows] = vecs.data[rows] @ mats.data[u].T

    def back(g):
        gm = np.zeros_like(mats.data)
        gv = np.zeros_like(vecs.data)
        for u, rows in enumerate(groups):
            if rows.size:
                gm[u] = g[rows].T @ vecs.data[rows]
                gv[rows] = g[rows] @ mats.data[u]
        return gm, gv

    return _make(out, (mats, vecs), back, "indexed_matvec")


def bce_with_logits(logits, targets, weights=None) -> Tensor:
    """Sum over labels of ``weight * sum over items of BCE(sigmoid(logit), target)``.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large |logits| never overflow.
    """
    z = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeMismatch("bce_with_logits", z.shape, y.shape)
    w = np.ones(z.shape[-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (z.shape[-1],):
        raise ShapeMismatch("bce_with_logits", z.shape, w.shape)
    zd = z.data
    per = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    loss = np.sum(per * w)
    return _make(np.asarray(loss), (z,), lambda g: (g * (_sigmoid(zd) - y) * w,), "bce_with_logits")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with ``requires_grad``.

    The graph is released afterwards; a second call on the same graph raises.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._parents:
            if p.requires_grad and id(p) not in nodes:
                stack.append(p)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for t in nodes.values():
        if not t.is_leaf:
            t._parents = ()
            t._backward = None
            t._consumed = True


# --------------------------------------------------------------------- optim


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place Adam update with bias correction.

    ``weight_decay`` is added to the gradient as ``weight_decay * param`` (L2 form).
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeMismatch("adam_step", (len(params),), (len(state.m),), (len(grads),))
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch("adam_step", p.shape, g.shape, m.shape)
        if weight_decay:
            g = g + weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params],
            self.state,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )


# ------------------------------------------------------------------ schedule


@dataclass
class ScheduleConfig:
    kind: str = "constant"  # constant | exponential_steps | fractional_span
    lr0: float = 1e-3
    rate: float = 0.5  # exponential_steps: factor per decay_steps
    decay_steps: int = 840
    decay: float = 0.08  # fractional_span: lr ratio reached at span end
    span: float = 0.9  # fractional_span: fraction of epochs spent decaying
    epochs: int = 100

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lr_schedule(cfg: ScheduleConfig, step: int = 0, epoch: int = 0) -> float:
    """Learning rate at a global optimizer step (exponential) or epoch (fractional span)."""
    if cfg.kind == "constant":
        return cfg.lr0
    if cfg.kind == "exponential_steps":
        return cfg.lr0 * cfg.rate ** (step / cfg.decay_steps)
    if cfg.kind == "fractional_span":
        end = cfg.span * cfg.epochs
        if end <= 0:
            return cfg.lr0 * cfg.decay
        return cfg.lr0 * cfg.decay ** (min(epoch, end) / end)
    raise ValueError(f"unknown schedule {cfg.kind!r}")


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"OPCK"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f8")}


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], manifest: str | Path | None = None) -> None:
    """Binary layout: magic, u32 version, u32 count; per tensor: u16 name length, name,
    u8 dtype code, u8 ndim, u64 dims, little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            arr = np.asarray(arr, dtype="<f8", order="C")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    if manifest is not None:
        entries = [{"name": n, "dtype": "float64", "shape": list(np.shape(a))} for n, a in tensors.items()]
        Path(manifest).write_text(
            json.dumps({"format": "odorpair-checkpoint", "version": CHECKPOINT_VERSION, "tensors": entries}, indent=1)
            + "\n"
        )


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype=dtype, count=size, offset=off).reshape(shape).copy()
        off += size * dtype.itemsize
    return out
