"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``Tape`` context are recorded in execution
order, which is already a topological order of the graph, so ``backward``
only has to walk the record in reverse.  Outside a tape nothing is
recorded and tensors behave like plain arrays.

    >>> x = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([ 2., -4.])
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class AutodiffError(Exception):
    """Base class for misuse of the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    pass


class ContractError(AutodiffError):
    pass


class NumericError(AutodiffError, FloatingPointError):
    pass


class _Op:
    __slots__ = ("name", "inputs", "out", "backward")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.epoch = 0

    def record(self, name, inputs, out, backward_fn):
        out.node_id = len(self.ops)
        out._tape = self
        self.ops.append(_Op(name, inputs, out, backward_fn))

    def clear(self):
        for op in self.ops:
            op.out.node_id = None
            op.out._tape = None
        self.ops = []
        self.epoch += 1

    def __len__(self):
        return len(self.ops)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_TAPES: list[Optional[Tape]] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording even inside an enclosing tape."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name, data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.node_id = None
    out.name = None
    out._tape = None
    if needs:
        tape.record(name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _emit("sub", data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _emit("mul", data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _emit("scale", x.data * c, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1] if x.ndim else 1))
    data = kernels.gelu_forward(flat).reshape(x.shape)

    def bw(g):
        gf = np.ascontiguousarray(g.reshape(flat.shape))
        return (kernels.gelu_backward(flat, gf).reshape(x.shape),)

    return _emit("gelu", data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _emit("relu", x.data * mask, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", data, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _emit("transpose", x.data.transpose(axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(data, dtype=np.float64), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes along axis {axis}: {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return _emit("concat", data, tensors, bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _emit("broadcast_to", data, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", table.data[ids], (table,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix
    shared across the batch or has the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ between {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisation

def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: need at least one column, got {x.shape}")
    flat = _rows(x.data)
    if not np.all(np.isfinite(flat)):
        raise NumericError("softmax_rows: non-finite input")
    y = kernels.softmax_rows_forward(flat)

    def bw(g):
        return (kernels.softmax_rows_backward(y, _rows(g)).reshape(x.shape),)

    return _emit("softmax_rows", y.reshape(x.shape), (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {c}")
    flat = _rows(x.data)
    out, xhat, rstd = kernels.layer_norm_forward(flat, gain.data, bias.data, float(eps))

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(_rows(g), xhat, rstd, gain.data)
        return (gx.reshape(x.shape) if x.requires_grad else None,
                gg if gain.requires_grad else None,
                gb if bias.requires_grad else None)

    return _emit("layer_norm", out.reshape(x.shape), (x, gain, bias), bw)


# ---------------------------------------------------------------- attention / losses

def attention(q: Tensor, k: Tensor, v: Tensor, d_k: int) -> Tensor:
    """``softmax_rows(q kᵀ / sqrt(d_k)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or q.shape[-1] != d_k:
        raise ShapeError(f"attention: q {q.shape} and k {k.shape} must share last dimension d_k={d_k}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: k {k.shape} and v {v.shape} must share row count")
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores), v)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    A 1-D ``logits`` with an integer target gives a scalar; a ``(B, K)``
    batch with ``B`` integer targets gives the ``B`` per-row losses.
    """
    single = logits.ndim == 1
    k = logits.shape[-1]
    if k < 2:
        raise ShapeError(f"cross_entropy: need K >= 2 classes, got {k}")
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    flat = _rows(logits.data)
    if tgt.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {tgt.shape[0]} targets for {flat.shape[0]} rows")
    if tgt.min() < 0 or tgt.max() >= k:
        raise IndexError(f"cross_entropy: target outside [0, {k})")
    logp = kernels.log_softmax_rows(flat)
    rows = np.arange(flat.shape[0])
    losses = -logp[rows, tgt]
    data = losses.reshape(()) if single else losses

    def bw(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        p *= np.reshape(g, (-1, 1))
        return (p.reshape(logits.shape),)

    return _emit("cross_entropy", data, (logits,), bw)


# ---------------------------------------------------------------- backward pass

def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

    Grads are added to any existing buffer; zero them between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape if tape is None else tape
    if tape is None or loss.node_id is None or loss._tape is not tape:
        raise ContractError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for op in tape.ops[loss.node_id + 1:]:
        for t in op.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
    for op in reversed(tape.ops[: loss.node_id + 1]):
        g = grads.get(id(op.out))
        for t in op.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        if g is None:
            continue
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
    for key, t in seen.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        elif t.grad is None and t.node_id is None:
            g = g.copy()  # leaves may be updated in place by optimizers
        if t.grad is None:
            t.grad = g.reshape(t.shape)
        else:
            t.grad = t.grad + g.reshape(t.shape)


def grad_check(f: Callable[..., Tensor], x, step: float = 1e-5,
               sample: Optional[int] = None, rng=None, order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors passed positionally to
    ``f``.  ``sample`` limits the check to that many random coordinates
    per tensor.  Relative error uses the denominator max(|a|, |n|, 1e-8).

    ``order=4`` switches to the five-point central stencil, whose
    truncation error is O(step**4).  Deep compositions with small
    gradients need it: the three-point estimate there can be off by more
    than the tolerance while the analytic gradient is exact.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*xs)
    backward(out, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
    tape.clear()

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if sample is not None and sample < flat.size:
                idx = rng.choice(flat.size, size=sample, replace=False)
            a_flat = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*xs).item()
                flat[i] = orig - step
                fm = f(*xs).item()
                if order == 2:
                    num = (fp - fm) / (2 * step)
                else:
                    flat[i] = orig + 2 * step
                    fp2 = f(*xs).item()
                    flat[i] = orig - 2 * step
                    fm2 = f(*xs).item()
                    num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * step)
                flat[i] = orig
                denom = max(abs(a_flat[i]), abs(num), 1e-8)
                worst = max(worst, abs(a_flat[i] - num) / denom)
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad, t.grad = rg, g
    return worst
