"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array; operations record themselves on a
thread-local :class:`Tape` whenever any input requires gradients.  Calling
:func:`backward` on a scalar loss walks the tape once, in reverse insertion
order, and accumulates gradients into every participating tensor.  The tape
is define-by-run: training code opens a fresh ``with Tape():`` block per
step so graphs never leak across steps.

Everything is float64.  Root solving and log-determinant accumulation in the
flow layers are precision sensitive and do not meet their roundtrip targets
in float32.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

Array = np.ndarray

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = [Tape()]
    return stack


def current_tape() -> "Tape | None":
    return _tape_stack()[-1]


class Tape:
    """Ordered record of operations, walked backwards by :func:`backward`.

    Topological order is preserved by construction: an op is appended only
    after all its inputs exist, so a single reverse pass visits every node
    exactly once with its output gradient fully accumulated.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, Callable[[Array], None]]] = []

    def record(self, out: "Tensor", backward_fn: Callable[[Array], None]) -> None:
        self.nodes.append((out, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        # Accumulate into a per-call store so a second backward on the same
        # tape adds one fresh gradient per tensor instead of compounding
        # stale intermediate gradients.
        store: dict[int, list] = {}
        _tls.store = store
        store[id(loss)] = [loss, np.ones_like(loss.data)]
        try:
            for out, fn in reversed(self.nodes):
                entry = store.get(id(out))
                if entry is not None:
                    fn(entry[1])
        finally:
            _tls.store = None
        for t, g in store.values():
            t.grad = g if t.grad is None else t.grad + g


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class Tensor:
    """Dense float64 array that can participate in reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _recording(*tensors: Tensor) -> Tape | None:
    tape = current_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in tensors):
        return tape
    return None


def _accum(t: Tensor, g: Array) -> None:
    store = getattr(_tls, "store", None)
    if store is None:
        t.grad = g.copy() if t.grad is None else t.grad + g
        return
    entry = store.get(id(t))
    if entry is None:
        store[id(t)] = [t, g.copy()]
    else:
        entry[1] = entry[1] + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _const(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bdata = _const(b)
        try:
            out = Tensor(a.data + bdata)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        tape = _recording(a)
        if tape is not None:
            out.requires_grad = True

            def bw(g, a=a):
                _accum(a, _unbroadcast(g, a.shape))

            tape.record(out, bw)
        return out
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True

        def bw(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))

        tape.record(out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bdata = _const(b)
        try:
            out = Tensor(a.data * bdata)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc
        tape = _recording(a)
        if tape is not None:
            out.requires_grad = True

            def bw(g, a=a, bdata=bdata):
                _accum(a, _unbroadcast(g * bdata, a.shape))

            tape.record(out, bw)
        return out
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True
        adata, bdata = a.data, b.data

        def bw(g, a=a, b=b, adata=adata, bdata=bdata):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bdata, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * adata, b.shape))

        tape.record(out, bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True
        adata, bdata = a.data, b.data

        def bw(g, a=a, b=b, adata=adata, bdata=bdata):
            if a.requires_grad:
                _accum(a, g @ bdata.T)
            if b.requires_grad:
                _accum(b, adata.T @ g)

        tape.record(out, bw)
    return out


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        y = out.data

        def bw(g, x=x, y=y):
            _accum(x, g * (1.0 - y * y))

        tape.record(out, bw)
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        y = out.data

        def bw(g, x=x, y=y):
            _accum(x, g * y)

        tape.record(out, bw)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = Tensor(np.log(x.data))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        xdata = x.data

        def bw(g, x=x, xdata=xdata):
            _accum(x, g / xdata)

        tape.record(out, bw)
    return out


def softplus(x: Tensor) -> Tensor:
    # log1p(exp(-|x|)) + max(x, 0): overflow-free for large |x|
    xd = x.data
    out = Tensor(np.log1p(np.exp(-np.abs(xd))) + np.maximum(xd, 0.0))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

        def bw(g, x=x, sig=sig):
            _accum(x, g * sig)

        tape.record(out, bw)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        xdata = x.data

        def bw(g, x=x, xdata=xdata):
            _accum(x, g * 2.0 * xdata)

        tape.record(out, bw)
    return out


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0.0):
        raise DomainError("reciprocal requires nonzero inputs")
    out = Tensor(1.0 / x.data)
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        y = out.data

        def bw(g, x=x, y=y):
            _accum(x, -g * y * y)

        tape.record(out, bw)
    return out


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        shape = x.shape

        def bw(g, x=x, shape=shape, axis=axis, keepdims=keepdims):
            if axis is None:
                _accum(x, np.broadcast_to(g, shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(g, shape))

        tape.record(out, bw)
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        shape = x.shape
        count = x.data.size if axis is None else np.prod(
            [shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def bw(g, x=x, shape=shape, axis=axis, keepdims=keepdims, count=count):
            g = g / count
            if axis is None:
                _accum(x, np.broadcast_to(g, shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(g, shape))

        tape.record(out, bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _recording(*tensors)
    if tape is not None:
        out.requires_grad = True
        sizes = [t.shape[axis] for t in tensors]
        bounds = np.cumsum(sizes)[:-1]

        def bw(g, tensors=tensors, bounds=bounds, axis=axis):
            for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
                if t.requires_grad:
                    _accum(t, piece)

        tape.record(out, bw)
    return out


def take(x: Tensor, key) -> Tensor:
    """Basic slicing (the tape-op counterpart of ``x[key]``)."""
    out = Tensor(np.ascontiguousarray(x.data[key]))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True

        def bw(g, x=x, key=key):
            gz = np.zeros(x.shape)
            gz[key] += g
            _accum(x, gz)

        tape.record(out, bw)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _recording(x)
    if tape is not None:
        out.requires_grad = True
        orig = x.shape

        def bw(g, x=x, orig=orig):
            _accum(x, g.reshape(orig))

        tape.record(out, bw)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, composed from the tanh primitive."""
    return add(mul(tanh(mul(x, 0.5)), 0.5), 0.5)


def logsumexp_rows(cols: Sequence[Tensor]) -> Tensor:
    """Stable log(sum_i exp(c_i)) across a list of (B,) tensors.

    The max shift is treated as a constant, which is exact for gradients.
    """
    stacked = np.stack([c.data for c in cols], axis=0)
    shift = stacked.max(axis=0)
    total = None
    for c in cols:
        e = exp(add(c, -shift))
        total = e if total is None else add(total, e)
    return add(log(total), shift)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the current tape."""
    tape = current_tape()
    if tape is None:
        raise ShapeError("backward called inside no_grad")
    tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def adam_update(
    param: Array,
    grad: Array,
    m: Array,
    v: Array,
    t: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One bias-corrected Adam step, in place on ``param``, ``m`` and ``v``."""
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            adam_update(p.data, g, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)
