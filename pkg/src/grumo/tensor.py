"""Dense rank-4 tensors and a reverse-mode autodiff tape.

Every public operation takes :class:`Tensor` inputs and returns a new
:class:`Tensor`.  When at least one input lives on a :class:`Tape` the
operation is recorded, so gradients of a scalar loss can later be pulled
back to any tagged intermediate node with :func:`backward`.

Buffers are float32 by default.  Operations are dtype-generic, which lets
finite-difference oracles replay a tape in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable dense array, optionally bound to a node of a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        where = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


@dataclass
class _Record:
    name: str
    inputs: tuple[int, ...]
    fn: Callable | None
    vjp: Callable | None
    requires_grad: bool = False


class Tape:
    """Ordered record of primitive operations.

    Node ids are assigned in execution order, so every input precedes its
    consumer.  Activations are stored eagerly.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.values: list[np.ndarray] = []
        self.tags: dict[str, int] = {}
        self.grads: dict[int, np.ndarray] = {}
        self._const_ids: dict[int, int] = {}

    def __len__(self):
        return len(self.records)

    def _push(self, rec: _Record, value: np.ndarray) -> int:
        self.records.append(rec)
        self.values.append(value)
        return len(self.records) - 1

    def leaf(self, t: Tensor | np.ndarray, requires_grad: bool = False, dtype=None) -> Tensor:
        """Register ``t`` as an input node of this tape."""
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=dtype or np.float32)
        node = self._push(_Record("leaf", (), None, None, requires_grad), arr)
        return Tensor._wrap(arr, self, node)

    def _ensure(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node
        if t.tape is not None:
            raise ValueError("tensor belongs to a different tape")
        key = id(t.data)
        node = self._const_ids.get(key)
        if node is None or self.values[node] is not t.data:
            node = self._push(_Record("const", (), None, None), t.data)
            self._const_ids[key] = node
        return node

    def tag(self, name: str, t: Tensor) -> Tensor:
        if t.tape is not self:
            raise ValueError(f"cannot tag {name!r}: tensor is not on this tape")
        if name in self.tags:
            raise ValueError(f"tag {name!r} already used")
        self.tags[name] = t.node
        return t

    def activation(self, tag: str) -> Tensor:
        return Tensor._wrap(self.values[self.tags[tag]])

    def grad(self, key: str | Tensor) -> Tensor:
        node = self.tags[key] if isinstance(key, str) else key.node
        if node not in self.grads:
            raise KeyError(f"no gradient stored for {key!r}; run backward first")
        return Tensor._wrap(self.grads[node])

    def replay(self, overrides: dict[int, np.ndarray] | None = None, dtype=None) -> list[np.ndarray]:
        """Recompute every node from the stored leaves.

        ``overrides`` pins node values (leaf or intermediate); downstream
        nodes are recomputed from them.  ``dtype`` casts all leaves first.
        """
        overrides = overrides or {}
        vals: list[np.ndarray] = []
        for i, rec in enumerate(self.records):
            if i in overrides:
                v = np.asarray(overrides[i])
                if dtype is not None:
                    v = v.astype(dtype, copy=False)
            elif rec.fn is None:
                v = self.values[i]
                if dtype is not None:
                    v = v.astype(dtype, copy=False)
            else:
                v = rec.fn(*(vals[j] for j in rec.inputs))
            vals.append(v)
        return vals


def _common_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs are bound to different tapes")
    return tape


def _apply(name: str, fn: Callable, vjp: Callable, *inputs: Tensor) -> Tensor:
    out = fn(*(t.data for t in inputs))
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(tape._ensure(t) for t in inputs)
    req = any(tape.records[i].requires_grad for i in ids)
    node = tape._push(_Record(name, ids, fn, vjp, req), out)
    return Tensor._wrap(out, tape, node)


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Pull d(loss) back to every tagged node and to each tensor in ``wrt``.

    Tagged gradients land in ``tape.grads`` (see :meth:`Tape.grad`); the
    gradients for ``wrt`` are also returned in order.  Gradients of other
    nodes are dropped as soon as they have been propagated.
    """
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss node is not on this tape")
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar node, got shape {loss.shape}")
    wrt = list(wrt)
    for t in wrt:
        if t.tape is not tape:
            raise ValueError("wrt tensor is not on this tape")
    targets = set(tape.tags.values()) | {t.node for t in wrt}

    # nodes whose gradient is needed: targets and everything downstream of one
    live = np.zeros(len(tape.records), dtype=bool)
    for i, rec in enumerate(tape.records):
        live[i] = i in targets or any(live[j] for j in rec.inputs)

    tape.grads = {}
    pending: dict[int, np.ndarray] = {loss.node: np.ones_like(tape.values[loss.node])}
    for i in range(loss.node, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        if i in targets:
            tape.grads[i] = g
        rec = tape.records[i]
        if rec.vjp is None:
            continue
        needs = tuple(bool(live[j]) for j in rec.inputs)
        if not any(needs):
            continue
        in_vals = [tape.values[j] for j in rec.inputs]
        in_grads = rec.vjp(g, tape.values[i], needs, *in_vals)
        for j, need, gj in zip(rec.inputs, needs, in_grads):
            if not need or gj is None:
                continue
            if j in pending:
                pending[j] = pending[j] + gj
            else:
                pending[j] = gj
    out = []
    for t in wrt:
        g = tape.grads.get(t.node)
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


# --------------------------------------------------------------------------
# convolution

def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _mirror_sum(parts: list[np.ndarray]) -> np.ndarray:
    # columns j and kw-1-j are added first; IEEE addition commutes, so a
    # mirror-symmetric kernel on a mirror-symmetric input gives a
    # bitwise mirror-symmetric result.
    k = len(parts)
    out = None
    for j in range(k // 2):
        pair = parts[j] + parts[k - 1 - j]
        out = pair if out is None else out + pair
    if k % 2:
        mid = parts[k // 2]
        out = mid if out is None else out + mid
    return out


def _conv_fwd_strided(x, w, b, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(_pad(x, pad), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    parts = [np.tensordot(win[..., j], w[:, :, :, j], axes=([1, 4], [1, 2])) for j in range(kw)]
    out = _mirror_sum(parts)
    if b is not None:
        out = out + b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _flat_padded(x, pad, kw):
    # zero-pad and flatten the spatial dims; one extra bottom row keeps every
    # tap's slice in range
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad + 1, w + 2 * pad
    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp.reshape(n, c, hp * wp), wp


def _conv_fwd(x, w, b, stride, pad):
    if stride != 1:
        return _conv_fwd_strided(x, w, b, stride, pad)
    # Each tap (i, j) is a contiguous slice of the row-flattened padded input,
    # computed over padded-width rows; the wrap-around columns are dropped.
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    ho, wo = x.shape[2] + 2 * pad - kh + 1, x.shape[3] + 2 * pad - kw + 1
    xf, wp = _flat_padded(x, pad, kw)
    span = ho * wp
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # BLAS needs contiguous (co, c) blocks
    parts = []
    for j in range(kw):
        acc = None
        for i in range(kh):
            off = i * wp + j
            t = np.matmul(taps[i, j], xf[:, :, off:off + span])
            acc = t if acc is None else acc + t
        parts.append(acc)
    out = _mirror_sum(parts)
    if b is not None:
        out = out + b.reshape(1, co, 1)
    return np.ascontiguousarray(out.reshape(n, co, ho, wp)[:, :, :, :wo])


def _conv_vjp_strided(g, out, needs, x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gt = g.transpose(0, 2, 3, 1)
    xp = _pad(x, pad)
    dxp = np.zeros(xp.shape, dtype=np.result_type(g, w)) if needs[0] else None
    dw = np.zeros(w.shape, dtype=np.result_type(g, x)) if needs[1] else None
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            if needs[1]:
                dw[:, :, i, j] = np.tensordot(gt, xp[:, :, rows, cols], axes=([0, 1, 2], [0, 2, 3]))
            if needs[0]:
                dxp[:, :, rows, cols] += np.tensordot(gt, w[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
    dx = None
    if needs[0]:
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw


def _conv_vjp(g, out, needs, x, w, b, stride, pad):
    db = g.sum(axis=(0, 2, 3)) if len(needs) > 2 and needs[2] else None
    if stride != 1:
        return _conv_vjp_strided(g, out, needs, x, w, b, stride, pad) + (db,)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xf, wp = _flat_padded(x, pad, kw)
    span = ho * wp
    gext = np.zeros((n, co, ho, wp), dtype=g.dtype)
    gext[:, :, :, :wo] = g
    gext = gext.reshape(n, co, span)
    dxf = np.zeros(xf.shape, dtype=np.result_type(g, w)) if needs[0] else None
    dw = np.zeros(w.shape, dtype=np.result_type(g, x)) if needs[1] else None
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            if needs[1]:
                dw[:, :, i, j] = np.matmul(gext, xf[:, :, off:off + span].transpose(0, 2, 1)).sum(axis=0)
            if needs[0]:
                dxf[:, :, off:off + span] += np.matmul(taps_t[i, j], gext)
    dx = None
    if needs[0]:
        dx = dxf.reshape(n, c, -1, wp)[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an (n, c_in, h, w) input."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    ho = (x.shape[2] + 2 * pad - weight.shape[2]) // stride + 1
    wo = (x.shape[3] + 2 * pad - weight.shape[3]) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")

    if bias is None:
        fn = lambda a, k: _conv_fwd(a, k, None, stride, pad)
        vjp = lambda g, o, nd, a, k: _conv_vjp(g, o, nd, a, k, None, stride, pad)[:2]
        return _apply("conv2d", fn, vjp, x, weight)
    fn = lambda a, k, c: _conv_fwd(a, k, c, stride, pad)
    vjp = lambda g, o, nd, a, k, c: _conv_vjp(g, o, nd, a, k, c, stride, pad)
    return _apply("conv2d", fn, vjp, x, weight, bias)


# --------------------------------------------------------------------------
# pointwise

def relu(x: Tensor) -> Tensor:
    return _apply("relu", lambda a: np.maximum(a, 0), lambda g, o, nd, a: (g * (a > 0),), x)


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0)))


def elu(x: Tensor) -> Tensor:
    return _apply("elu", _elu, lambda g, o, nd, a: (g * np.where(a > 0, 1, np.exp(np.minimum(a, 0))),), x)


def _sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1)


def sigmoid(x: Tensor) -> Tensor:
    return _apply("sigmoid", _sigmoid, lambda g, o, nd, a: (g * o * (1 - o),), x)


def exp(x: Tensor) -> Tensor:
    return _apply("exp", np.exp, lambda g, o, nd, a: (g * o,), x)


def square(x: Tensor) -> Tensor:
    return _apply("square", np.square, lambda g, o, nd, a: (2 * a * g,), x)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    return _apply("clamp", lambda a: np.clip(a, lo, hi),
                  lambda g, o, nd, a: (g * ((a >= lo) & (a <= hi)),), x)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _apply("add", np.add, lambda g, o, nd, x, y: (g, g), a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _apply("sub", np.subtract, lambda g, o, nd, x, y: (g, -g), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _apply("mul", np.multiply, lambda g, o, nd, x, y: (g * y, g * x), a, b)


def mul_scalar(x: Tensor, s: float) -> Tensor:
    return _apply("mul_scalar", lambda a: a * s, lambda g, o, nd, a: (g * s,), x)


def add_scalar(x: Tensor, s: float) -> Tensor:
    return _apply("add_scalar", lambda a: a + s, lambda g, o, nd, a: (g,), x)


_UNARY = {"relu": relu, "elu": elu, "sigmoid": sigmoid, "square": square, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args):
    """Dispatch by name: unary ops, binary ops, or ``mul_scalar(t, s)``."""
    if op in _UNARY:
        return _UNARY[op](*args)
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "mul_scalar":
        return mul_scalar(*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# structural

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, t.shape)) if k != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, o, nd, *xs):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(xs)))

    return _apply("concat", lambda *xs: np.concatenate(xs, axis=axis), vjp, *tensors)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    """Sum of all elements as a 1x1x1x1 (rank-preserving) node."""
    shape = (1,) * x.data.ndim

    def fn(a):
        return np.asarray(np.sum(a, dtype=np.float64), dtype=a.dtype).reshape(shape)

    return _apply("sum", fn, lambda g, o, nd, a: (np.broadcast_to(g, a.shape).astype(a.dtype),), x)


def mean(x: Tensor) -> Tensor:
    shape = (1,) * x.data.ndim
    n = x.size

    def fn(a):
        return np.asarray(np.sum(a, dtype=np.float64) / n, dtype=a.dtype).reshape(shape)

    return _apply("mean", fn, lambda g, o, nd, a: (np.broadcast_to(g / n, a.shape).astype(a.dtype),), x)


def _pool_fwd(a):
    return ((a[:, :, 0::2, 0::2] + a[:, :, 0::2, 1::2]) + (a[:, :, 1::2, 0::2] + a[:, :, 1::2, 1::2])) * 0.25


def _up_fwd(a):
    return np.repeat(np.repeat(a, 2, axis=2), 2, axis=3)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (even spatial sizes only)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {x.shape}")
    return _apply("avg_pool2", _pool_fwd, lambda g, o, nd, a: (_up_fwd(g) * 0.25,), x)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    def vjp(g, o, nd, a):
        return (g[:, :, 0::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 0::2] + g[:, :, 1::2, 1::2],)

    return _apply("upsample2", _up_fwd, vjp, x)


def hflip(x: Tensor) -> Tensor:
    """Reverse the last (width) axis."""
    f = lambda a: np.ascontiguousarray(a[..., ::-1])
    return _apply("hflip", f, lambda g, o, nd, a: (f(g),), x)


# --------------------------------------------------------------------------
# oracle

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-3,
                     indices: Iterable[int] | None = None) -> Tensor:
    """Central-difference gradient of a scalar function, evaluated in float64.

    With ``indices`` only those flat positions are probed; the rest stay 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def ev():
        v = f(Tensor(base, dtype=np.float64))
        return float(np.asarray(v.data if isinstance(v, Tensor) else v).reshape(-1)[0])

    for j in range(flat.size) if indices is None else indices:
        orig = flat[j]
        flat[j] = orig + eps
        fp = ev()
        flat[j] = orig - eps
        fm = ev()
        flat[j] = orig
        grad[j] = (fp - fm) / (2 * eps)
    return Tensor(grad.reshape(base.shape), dtype=np.float64)
