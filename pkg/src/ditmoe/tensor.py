"""Dense float64 tensors with reverse-mode automatic differentiation.

Every layer downstream (attention, experts, the diffusion model) is built
from the ops in this module, so the contract is deliberately strict:

* float64 everywhere; inputs are coerced on construction.
* Ops are pure: they never mutate their inputs and allocate fresh outputs.
* Broadcasting is restricted to two cases that cover everything we need:
  a 0-d scalar against anything, and a trailing (suffix) shape expanded
  over leading batch dimensions.  Anything else raises ShapeError naming
  both shapes.  Deliberate repetition goes through `expand`.
* The graph is the web of op records hanging off each result tensor.  It
  is rebuilt on every forward pass and freed as `backward` walks it, so
  holding on to a loss tensor after backward does not pin activations.

Gradients accumulate into leaf tensors only; call sites are expected to
zero or consume `.grad` between steps (repeated backward calls add up).
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "sigmoid",
    "silu",
    "softmax_rows",
    "layernorm",
    "rmsnorm",
    "reshape",
    "transpose",
    "expand",
    "concat",
    "index_select",
    "take",
    "scatter_add",
    "tensor_sum",
    "tensor_mean",
    "backward",
    "find_first_nonfinite",
    "global_norm",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_id_counter = itertools.count()

# When False, ops still compute forward values but record no graph.
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording (used by samplers and EMA evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Record:
    """One recorded op: parent tensors plus the rule mapping the output
    gradient to parent gradients (returned in parent order, None for
    parents that need no gradient)."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    `grad` is None until a backward pass reaches this leaf; None means
    zero.  `_id` is a creation counter used only for diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_record", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._record = None
        self._id = next(_id_counter)

    @classmethod
    def _result(cls, data: np.ndarray, record) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = record is not None
        out.grad = None
        out.name = ""
        out._record = record
        out._id = next(_id_counter)
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape},{tag} requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are wrapped as constant 0-d tensors.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _wants_grad(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _check_suffix(a_shape: tuple, b_shape: tuple):
    """Elementwise compatibility: equal shapes, a 0-d scalar on either
    side, or one shape being a trailing suffix of the other."""
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not suffix-compatible")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (leading dims only)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # No size-1 stretching ever happens under the suffix rule, so shapes
    # must agree now.
    if grad.shape != tuple(shape):
        raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")
    return grad


def _elementwise(a: Tensor, b: Tensor, fwd, bwd_a, bwd_b) -> Tensor:
    _check_suffix(a.shape, b.shape)
    data = fwd(a.data, b.data)
    if not _wants_grad(a, b):
        return Tensor._result(data, None)

    def backward_rule(g):
        ga = _reduce_to(bwd_a(g), a.shape) if a.requires_grad or a._record else None
        gb = _reduce_to(bwd_b(g), b.shape) if b.requires_grad or b._record else None
        return ga, gb

    return Tensor._result(data, _Record((a, b), backward_rule))


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _elementwise(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _elementwise(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _elementwise(a, b, lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _elementwise(
        a, b,
        lambda x, y: x / y,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    data = x.data * factor
    if not _wants_grad(x):
        return Tensor._result(data, None)
    return Tensor._result(data, _Record((x,), lambda g: (g * factor,)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.  Leading dims must match exactly, or one
    operand is a plain matrix applied across the other's batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    if not _wants_grad(a, b):
        return Tensor._result(data, None)

    def backward_rule(g):
        ga = _reduce_to(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _reduce_to(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(data, _Record((a, b), backward_rule))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable across the full float64 range."""
    data = _sigmoid_stable(x.data)
    if not _wants_grad(x):
        return Tensor._result(data, None)
    return Tensor._result(data, _Record((x,), lambda g: (g * data * (1.0 - data),)))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid_stable(x.data)
    data = x.data * sig
    if not _wants_grad(x):
        return Tensor._result(data, None)

    def backward_rule(g):
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return Tensor._result(data, _Record((x,), backward_rule))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    if not _wants_grad(x):
        return Tensor._result(data, None)

    def backward_rule(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return Tensor._result(data, _Record((x,), backward_rule))


def layernorm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    the optional affine pair (both 1-d over the last axis)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat
    if weight is not None:
        data = data * weight.data
    if bias is not None:
        data = data + bias.data
    parents = [x] + [t for t in (weight, bias) if t is not None]
    if not _wants_grad(*parents):
        return Tensor._result(data, None)

    def backward_rule(g):
        grads = []
        gxhat = g * weight.data if weight is not None else g
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        grads.append(inv * (gxhat - m1 - xhat * m2))
        if weight is not None:
            grads.append(_reduce_to(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_reduce_to(g, bias.shape))
        return tuple(grads)

    return Tensor._result(data, _Record(tuple(parents), backward_rule))


def rmsnorm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Scale the last axis by its root-mean-square; optional gain."""
    n = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    data = xhat * weight.data if weight is not None else xhat
    parents = [x] + ([weight] if weight is not None else [])
    if not _wants_grad(*parents):
        return Tensor._result(data, None)

    def backward_rule(g):
        gxhat = g * weight.data if weight is not None else g
        inner = (gxhat * x.data).sum(axis=-1, keepdims=True)
        gx = gxhat * inv - x.data * (inv ** 3) * inner / n
        if weight is None:
            return (gx,)
        return gx, _reduce_to(g * xhat, weight.shape)

    return Tensor._result(data, _Record(tuple(parents), backward_rule))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)
    if not _wants_grad(x):
        return Tensor._result(data, None)
    return Tensor._result(data, _Record((x,), lambda g: (g.reshape(x.shape),)))


def transpose(x: Tensor, axes: tuple | None = None) -> Tensor:
    data = np.transpose(x.data, axes)
    if not _wants_grad(x):
        return Tensor._result(data, None)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._result(data, _Record((x,), lambda g: (np.transpose(g, inv),)))


def expand(x: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat a size-1 axis `reps` times (the explicit form of broadcast)."""
    if x.shape[axis] != 1:
        raise ShapeError(f"expand needs a size-1 axis, got {x.shape} axis {axis}")
    data = np.repeat(x.data, reps, axis=axis)
    if not _wants_grad(x):
        return Tensor._result(data, None)
    return Tensor._result(data, _Record((x,), lambda g: (g.sum(axis=axis, keepdims=True),)))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _wants_grad(*tensors):
        return Tensor._result(data, None)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(data, _Record(tuple(tensors), backward_rule))


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis; backward scatter-adds into the source, so
    repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select expects 1-d indices, got shape {idx.shape}")
    data = np.take(x.data, idx, axis=axis)
    if not _wants_grad(x):
        return Tensor._result(data, None)

    def backward_rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor._result(data, _Record((x,), backward_rule))


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather scalars by flat index; the output keeps the index shape."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    data = np.take(x.data.reshape(-1), idx)
    if not _wants_grad(x):
        return Tensor._result(data, None)

    def backward_rule(g):
        gx = np.zeros(x.size)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(x.shape),)

    return Tensor._result(data, _Record((x,), backward_rule))


def scatter_add(base: Tensor, indices, src: Tensor) -> Tensor:
    """Add rows of `src` into a copy of `base` at `indices` (axis 0)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) != src.shape[0]:
        raise ShapeError(f"scatter_add indices {idx.shape} do not match src {src.shape}")
    if base.shape[1:] != src.shape[1:]:
        raise ShapeError(f"scatter_add row shapes disagree: {base.shape} vs {src.shape}")
    data = base.data.copy()
    np.add.at(data, idx, src.data)
    if not _wants_grad(base, src):
        return Tensor._result(data, None)

    def backward_rule(g):
        return g, g[idx]

    return Tensor._result(data, _Record((base, src), backward_rule))


def _check_reduce_axis(x: Tensor, axis):
    if axis is None:
        if x.size == 0:
            raise ShapeError("reduction over an empty tensor")
        return
    if x.shape[axis] == 0:
        raise ShapeError(f"zero-length reduction axis {axis} in shape {x.shape}")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_reduce_axis(x, axis)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not _wants_grad(x):
        return Tensor._result(np.asarray(data), None)

    def backward_rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(data), _Record((x,), backward_rule))


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_reduce_axis(x, axis)
    count = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss.

    Visits each reachable node exactly once in reverse topological order,
    accumulates into leaf `.grad`, and frees op records as it goes.
    Leaves that the loss does not depend on keep `grad=None` (zero).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for parent in node._record.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        record = node._record
        if record is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(record.parents, record.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # Freed results behave as constants from here on.
        node._record = None
        node.requires_grad = False


def find_first_nonfinite(root: Tensor) -> Tensor | None:
    """Walk the graph below `root` in creation order and return the
    earliest tensor holding a NaN or inf, or None.  Call before
    `backward`, which frees the graph."""
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        if node._record is not None:
            stack.extend(node._record.parents)
    bad = [n for n in nodes if not np.all(np.isfinite(n.data))]
    if not bad:
        return None
    return min(bad, key=lambda n: n._id)


def global_norm(grads) -> float:
    """L2 norm over a collection of gradient arrays (Nones skipped)."""
    total = 0.0
    for g in grads:
        if g is not None:
            total += float((g * g).sum())
    return math.sqrt(total)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 bound: float = 2.0) -> np.ndarray:
    """Normal samples with |z| <= bound (in units of sigma), rescaled by
    std.  Resamples rather than clipping, so the density has no atoms at
    the edges."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
