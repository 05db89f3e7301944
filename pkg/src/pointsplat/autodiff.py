"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records every differentiable operation in creation order, which is
topological by construction; ``backward`` replays the list once in reverse.
Fused kernels with hand-derived backwards (the rasterizer, convolutions,
samplers) plug in through ``custom``.

Tensors default to float32; wrap verification code in ``precision("f64")``
to run the same graph in float64. Broadcasting is deliberately restricted
to scalars and trailing-dimension alignment so that every backward rule is
a plain sum over leading axes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE = None
_DEBUG_CHECKS = False


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype; mode is "f32" or "f64"."""
    global _DEFAULT_DTYPE
    if mode not in ("f32", "f64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64 if mode == "f64" else np.float32
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation of every produced value."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Dense array with an optional gradient slot.

    Leaves are created directly; every op result carries a reference to the
    tape that recorded it. Data is treated as immutable once wrapped, except
    for optimizer updates which happen outside any tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Constant view of the same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _ew(self, other, "add")

    def __radd__(self, other):
        return _ew(_wrap(other, self.dtype), self, "add")

    def __sub__(self, other):
        return _ew(self, other, "sub")

    def __rsub__(self, other):
        return _ew(_wrap(other, self.dtype), self, "sub")

    def __mul__(self, other):
        return _ew(self, other, "mul")

    def __rmul__(self, other):
        return _ew(_wrap(other, self.dtype), self, "mul")

    def __truediv__(self, other):
        return _ew(self, other, "div")

    def __rtruediv__(self, other):
        return _ew(_wrap(other, self.dtype), self, "div")

    def __neg__(self):
        return _ew(self, -1.0, "mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        out_data = self.data[key]
        out = _result(np.ascontiguousarray(out_data), [self])

        def bwd(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            return [gx]

        _record(out, [self], bwd)
        return out

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered op record for one forward pass; context manager."""

    def __init__(self):
        self.nodes = []  # (out, inputs, backward_fn)
        self._used = False
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    The loss must be scalar. A tape supports exactly one backward pass;
    a second call raises (re-run the forward to accumulate).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise ValueError("no operations recorded for this tensor; run the forward under a Tape")
    if tape._used:
        raise RuntimeError("backward was already called on this tape; build a fresh tape to accumulate")
    tape._used = True

    loss.grad = np.ones_like(loss.data)
    for out, inputs, bwd in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = bwd(g)
        if len(grads) != len(inputs):
            raise ValueError(
                f"backward produced {len(grads)} gradients for {len(inputs)} inputs"
            )
        for inp, gi in zip(inputs, grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if gi.shape != inp.data.shape:
                raise ValueError(
                    f"gradient shape {gi.shape} does not match input shape {inp.data.shape}"
                )
            inp.grad = gi if inp.grad is None else inp.grad + gi


# -- recording helpers -------------------------------------------------------


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _result(data: np.ndarray, inputs: Sequence) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out.tape = None
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op (debug checks enabled)")
    return out


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> None:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        out.tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.nodes.append((out, list(inputs), bwd))


# -- broadcasting ------------------------------------------------------------


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(
        f"shapes {sa} and {sb} are not broadcast-compatible "
        "(only scalar and trailing-dimension broadcasting is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def _ew(a, b, kind: str) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    if kind == "add":
        out_data = ad + bd
    elif kind == "sub":
        out_data = ad - bd
    elif kind == "mul":
        out_data = ad * bd
    elif kind == "div":
        out_data = ad / bd
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    out = _result(out_data, [a, b])

    def bwd(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * bd, g * ad
        else:  # div
            ga = g / bd
            gb = -g * ad / (bd * bd)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]

    _record(out, [a, b], bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = _result(a.data @ b.data, [a, b])

    def bwd(g):
        return [g @ b.data.T, a.data.T @ g]

    _record(out, [a, b], bwd)
    return out


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _result(np.maximum(x.data, 0), [x])
    _record(out, [x], lambda g: [g * (x.data > 0)])
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    out = _result(s, [x])
    _record(out, [x], lambda g: [g * s * (1.0 - s)])
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) via the numerically stable branch; output > 0."""
    x = _wrap(x)
    out = _result(np.logaddexp(np.zeros((), dtype=x.dtype), x.data), [x])

    def bwd(g):
        xd = x.data
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        s[~pos] = e / (1.0 + e)
        return [g * s]

    _record(out, [x], bwd)
    return out


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _result(np.exp(x.data), [x])
    _record(out, [x], lambda g: [g * out.data])
    return out


def negexp_half(x: Tensor) -> Tensor:
    """exp(-x/2): the radial falloff of a Gaussian in squared-distance form."""
    x = _wrap(x)
    out = _result(np.exp(-0.5 * x.data), [x])
    _record(out, [x], lambda g: [-0.5 * g * out.data])
    return out


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _result(np.sqrt(x.data), [x])
    _record(out, [x], lambda g: [g * 0.5 / out.data])
    return out


def absolute(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _result(np.abs(x.data), [x])
    _record(out, [x], lambda g: [g * np.sign(x.data)])
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    out = _result(np.clip(x.data, lo, hi), [x])
    _record(out, [x], lambda g: [g * ((x.data > lo) & (x.data < hi))])
    return out


ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "negexp_half": negexp_half,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def softmax(x: Tensor, axis: int) -> Tensor:
    """Shift-invariant softmax along one axis; rows sum to one."""
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, [x])

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return [s * (g - dot)]

    _record(out, [x], bwd)
    return out


# -- reductions and shape ops --------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), [x])

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, x.shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, x.shape).copy()]

    _record(out, [x], bwd)
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, *shape) -> Tensor:
    x = _wrap(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = _result(x.data.reshape(shape), [x])
    _record(out, [x], lambda g: [g.reshape(x.shape)])
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), [*parts])
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return list(np.split(g, splits, axis=axis))

    _record(out, parts, bwd)
    return out


def stack_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new trailing axis."""
    return concat([reshape(p, p.shape + (1,)) for p in parts], axis=-1)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i...] = x[idx[i...]]; backward scatter-adds along axis 0."""
    x = _wrap(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows needs an integer index array")
    out = _result(x.data[idx], [x])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return [gx]

    _record(out, [x], bwd)
    return out


# -- custom kernels ------------------------------------------------------------


def custom(name: str, inputs: Sequence[Tensor], forward_fn: Callable, backward_fn: Callable) -> Tensor:
    """Register a fused kernel on the tape.

    forward_fn receives the raw arrays of the inputs and returns one array.
    backward_fn receives the output gradient and must return one gradient
    (or None) per input; producing any other count is a registration error
    reported when gradients are first requested.
    """
    inputs = [_wrap(i) for i in inputs]
    out_data = forward_fn(*[i.data for i in inputs])
    out = _result(np.asarray(out_data), inputs)

    def bwd(g):
        grads = backward_fn(g)
        if not isinstance(grads, (list, tuple)) or len(grads) != len(inputs):
            got = len(grads) if isinstance(grads, (list, tuple)) else 1
            raise ValueError(
                f"custom op {name!r} was registered with an invalid backward: "
                f"it produced {got} gradients for {len(inputs)} inputs"
            )
        return list(grads)

    _record(out, inputs, bwd)
    return out
