"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap an immutable numpy array. Operations executed while a :class:`Tape`
is active are recorded on it when at least one input participates in
differentiation; :meth:`Tape.backward` replays the records in reverse.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        tape.watch(w)
        loss = (w * w).sum()
    grads = tape.backward(loss)   # {w: Tensor([2., 2., 2.])}
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from semaim.errors import ContractError, DimensionError, NumericError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float64)
_tape_stack: list[Tape | None] = []

# Finite stand-ins for minus infinity added to masked attention scores.
MASK_FILL = {np.dtype(np.float32): -1e9, np.dtype(np.float64): -1e30}


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported dtype {dtype}; expected float32 or float64")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "tape_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("tensor", "parents", "backward_fn")

    def __init__(self, tensor, parents, backward_fn):
        self.tensor = tensor
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations run, so every input precedes its
    consumer. Leaves are nodes without a backward function.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> Tape:
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    @property
    def leaves(self) -> list[Tensor]:
        return [self._nodes[i].tensor for i in self._leaves]

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ContractError(f"can only watch Tensors, got {type(t).__name__}")
            if not t.requires_grad:
                raise ContractError("cannot watch a tensor with requires_grad=False")
            self._handle(t)

    def contains(self, t: Tensor) -> bool:
        return t._tape is self and t.tape_id is not None

    def _handle(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.tape_id
        if not t.requires_grad:
            return None
        index = len(self._nodes)
        self._nodes.append(_Node(t, (), None))
        self._leaves.append(index)
        t._tape, t.tape_id = self, index
        return index

    def _append(self, out: Tensor, parents, backward_fn) -> None:
        out.requires_grad = True
        out._tape, out.tape_id = self, len(self._nodes)
        self._nodes.append(_Node(out, parents, backward_fn))

    def vjp(self, output: Tensor, cotangent: np.ndarray) -> dict[Tensor, Tensor]:
        """Pull ``cotangent`` back from ``output`` to every leaf of the tape."""
        cotangent = np.asarray(cotangent, dtype=output.dtype)
        if cotangent.shape != output.shape:
            raise DimensionError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        if self.contains(output):
            grads[output.tape_id] = cotangent
            for index in range(output.tape_id, -1, -1):
                g = grads[index]
                node = self._nodes[index]
                if g is None or node.backward_fn is None:
                    continue
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if parent is None or pg is None:
                        continue
                    grads[parent] = pg if grads[parent] is None else grads[parent] + pg
                if index != output.tape_id:
                    grads[index] = None
        result = {}
        for index in self._leaves:
            leaf = self._nodes[index].tensor
            g = grads[index]
            result[leaf] = Tensor(np.zeros_like(leaf.data) if g is None else g)
        return result

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.contains(loss):
            raise ContractError("loss was not recorded on this tape")
        return self.vjp(loss, np.ones_like(loss.data))


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    return tape.backward(loss)


@contextlib.contextmanager
def no_grad():
    """Suspend recording; operations inside produce constant tensors."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or _default_dtype)


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*(t.dtype for t in tensors))


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is None:
        return out
    parents = tuple(tape._handle(t) for t in inputs)
    if all(p is None for p in parents):
        return out
    tape._append(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), grad)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1) if a.size else 1
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record(out, (a,), grad)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), grad)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if not eps > 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def grad(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + beta.data, (x, gamma, beta), grad)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)

    def grad(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _record(0.5 * xd * (1.0 + t), (x,), grad)


def mask_scores(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Add a large negative constant to scores where ``allow`` is false."""
    allow = np.asarray(allow, dtype=bool)
    try:
        fill = np.where(allow, 0.0, MASK_FILL[scores.dtype]).astype(scores.dtype)
        out = scores.data + fill
    except ValueError as exc:
        raise DimensionError(f"mask shape {allow.shape} does not broadcast to scores {scores.shape}") from exc
    if out.shape != scores.shape:
        raise DimensionError(f"mask shape {allow.shape} does not broadcast to scores {scores.shape}")
    return _record(out, (scores,), lambda g: (g,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
