"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations on :class:`Tensor` values always compute eagerly. When a
:class:`Tape` is active (``with Tape() as tape:``) and at least one operand
lives on that tape, the operation is also recorded together with a closure
computing its vector-Jacobian product. ``tape.backward(out)`` then walks the
records in reverse creation order, which is a valid topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class KernelError(Exception):
    """Base class for substrate errors."""


class ShapeError(KernelError, ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UsageError(KernelError, RuntimeError):
    pass


class NonFiniteError(KernelError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


_ACTIVE: list["Tape"] = []


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("op", "inputs", "vjp", "shape", "name")

    def __init__(self, op, inputs, vjp, shape, name=None):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape
        self.name = name


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value, name: str) -> "Tensor":
        """Register a leaf (parameter or input) whose gradient is wanted."""
        t = value if isinstance(value, Tensor) else Tensor(value)
        out = Tensor.__new__(Tensor)
        out.data = t.data
        out.name = name
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.data.shape, name))
        return out

    def _record(self, op, operands, data, vjp) -> "Tensor":
        ids = tuple(x._node if isinstance(x, Tensor) and x._tape is self else None
                    for x in operands)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.name = None
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(op, ids, vjp, data.shape))
        return out

    def clear(self):
        self.nodes = []

    def backward(self, output: "Tensor | None" = None, seed=None) -> dict[str, np.ndarray]:
        """Reverse sweep; returns ``{leaf name: gradient}`` and clears the tape."""
        if not self.nodes:
            raise UsageError("backward called before any forward pass was recorded")
        if output is None:
            out_id = len(self.nodes) - 1
        else:
            if output._tape is not self or output._node is None:
                raise UsageError("output tensor was not produced on this tape")
            out_id = output._node
        shape = self.nodes[out_id].shape
        if seed is None:
            if int(np.prod(shape)) != 1:
                raise UsageError(f"seed required for non-scalar output of shape {shape}")
            seed = np.ones(shape)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != shape:
            raise ShapeError("backward", seed.shape, shape, detail="seed must match output")

        grads: list = [None] * (out_id + 1)
        grads[out_id] = seed
        result: dict[str, np.ndarray] = {}
        for i in range(out_id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if node.op == "leaf":
                if node.name is not None:
                    result[node.name] = g if g is not None else np.zeros(node.shape)
                continue
            if g is None:
                continue
            parts = node.vjp(g)
            for j, gp in zip(node.inputs, parts):
                if j is None or gp is None:
                    continue
                grads[j] = gp if grads[j] is None else grads[j] + gp
        for node in self.nodes[out_id + 1:]:
            if node.op == "leaf" and node.name is not None:
                result.setdefault(node.name, np.zeros(node.shape))
        for name, g in result.items():
            _finite(g, f"backward[{name}]")
        self.clear()
        return result


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _wrap(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, operands: Sequence["Tensor"], data: np.ndarray,
           vjp: Callable[[np.ndarray], tuple]) -> "Tensor":
    _finite(data, op)
    tape = active_tape()
    if tape is not None and any(x._tape is tape for x in operands):
        return tape._record(op, operands, data, vjp)
    return Tensor._raw(data)


class Tensor:
    """An immutable-by-convention float64 array that may sit on a tape."""

    __slots__ = ("data", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        self.data = _finite(arr, "tensor")
        self.name = name
        self._tape = None
        self._node = None

    @classmethod
    def _raw(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.name = None
        t._tape = None
        t._node = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape(self) -> Tape | None:
        return self._tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _apply("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _apply("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div")
    out = ad / bd
    return _apply("div", (a, b), out,
                  lambda g: (_unbroadcast(g / bd, ad.shape),
                             _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    if not isinstance(p, (int, float)):
        raise TypeError("power exponent must be a python number")
    ad = a.data
    if p == 2:
        return _apply("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))
    return _apply("pow", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    return power(a, 2)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape,
                         detail="need (...,n,k) @ (...,k,m)")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _apply("matmul", (a, b), out, vjp)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _apply("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log")
    ad = a.data
    return _apply("log", (a,), np.log(ad), lambda g: (g / ad,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _apply("log_softmax", (a,), out,
                  lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, shape) from None
    return _apply("reshape", (a,), out, lambda g: (g.reshape(orig),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as e:
        raise ShapeError("getitem", shape, detail=str(e)) from None
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _apply("getitem", (a,), np.array(out, dtype=np.float64), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _apply("concat", ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def temporal_conv1d(x, kernel, dilation: int = 1) -> Tensor:
    """Causal dilated convolution over the time axis.

    ``x`` is ``(..., T, d_in)``, ``kernel`` is ``(k, d_in, d_out)``. Tap ``j``
    of the kernel multiplies the input ``(k - 1 - j) * dilation`` steps in the
    past, so the last tap sees the current step. Inputs before the sequence
    start are zeros; output length equals input length.
    """
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"temporal_conv1d: dilation must be a positive int, got {dilation!r}")
    x, kernel = _wrap(x), _wrap(kernel)
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError("temporal_conv1d", x.shape, kernel.shape,
                         detail="need x (...,T,d_in) and kernel (k,d_in,d_out)")
    k = kernel.shape[0]
    T = x.shape[-2]
    pad = (k - 1) * dilation
    xd, wd = x.data, kernel.data
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(xd, widths)
    out = np.zeros(xd.shape[:-1] + (wd.shape[2],))
    for j in range(k):
        s = j * dilation
        out += xp[..., s:s + T, :] @ wd[j]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(k):
            s = j * dilation
            gxp[..., s:s + T, :] += g @ wd[j].T
            gw[j] = xp[..., s:s + T, :].reshape(-1, xp.shape[-1]).T @ g2
        return gxp[..., pad:, :], gw

    return _apply("temporal_conv1d", (x, kernel), out, vjp)
