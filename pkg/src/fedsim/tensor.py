"""Minimal reverse-mode autodiff on float64 numpy arrays.

A ``Tensor`` owns a contiguous float64 array. Operations run eagerly and,
when a ``Tape`` is active on the current thread and any input requires
gradients, append a node (inputs, output, backward closure) to that tape.
``backward(loss)`` walks the tape in reverse, accumulating gradients into
``.grad`` on every tensor that requires them. Tapes are context managers
and are discarded after use; nothing here retains graph state between
steps. Views are never returned: reshape/transpose/slice/concat all copy,
so no op aliases or mutates its inputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Array = np.ndarray


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted, true division only by scalars
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
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Thread-confined recording of differentiable ops, used as a context."""

    _tls = threading.local()

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._tls, "stack", None)
        if stack is None:
            stack = []
            Tape._tls.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._tls.stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        stack = getattr(cls._tls, "stack", None)
        if not stack:
            return None
        return stack[-1]


def _record(op: str, inputs: tuple[Tensor, ...], out_data: Array, backward) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(op, inputs, out, backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate gradients of a scalar loss into ``.grad`` of tape tensors."""
    if tape is None:
        tape = Tape.current()
    if tape is None:
        raise RuntimeError("backward() requires an active or explicit Tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.backward(g, needs)
        for tensor, gi in zip(node.inputs, in_grads):
            if gi is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise FloatingPointError(f"non-finite gradient produced by op '{node.op}'")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = tensor
        if node.out.requires_grad:
            node.out.grad = g
    for key, remaining in grads.items():
        if holders[key].requires_grad:
            holders[key].grad = remaining


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _record("add", (a, b), out, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(-g, b.data.shape) if needs[1] else None,
        )

    return _record("sub", (a, b), out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), out, back)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def back(g, needs):
        return (g * s if needs[0] else None,)

    return _record("scale", (a,), out, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record("matmul", (a, b), out, back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape).copy()

    def back(g, needs):
        return (g.reshape(a.data.shape) if needs[0] else None,)

    return _record("reshape", (a,), out, back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def back(g, needs):
        return (np.ascontiguousarray(np.transpose(g, inv)) if needs[0] else None,)

    return _record("transpose", (a,), out, back)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def back(g, needs):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,)

    return _record("broadcast_to", (a,), out, back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def back(g, needs):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _record("concat", parts, out, back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def back(g, needs):
        if not needs[0]:
            return (None,)
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("slice", (a,), out, back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, needs):
        if not needs[0]:
            return (None,)
        return (_expand_reduced(g, a.data.shape, axis, keepdims),)

    return _record("sum", (a,), out, back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in _norm_axes(axis, a.data.ndim)])

    def back(g, needs):
        if not needs[0]:
            return (None,)
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return _record("mean", (a,), out, back)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None and not keepdims:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        kept = list(shape)
        for ax in _norm_axes(axis, len(shape)):
            kept[ax] = 1
        g = g.reshape(kept)
    return np.broadcast_to(g, shape).copy()


def softmax_lastdim(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Numerically stable softmax over the last axis at the given temperature."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        if not needs[0]:
            return (None,)
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner)) / temperature,)

    return _record("softmax", (a,), y, back)


def log_softmax_lastdim(a: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.data / temperature
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g, needs):
        if not needs[0]:
            return (None,)
        return ((g - soft * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record("log_softmax", (a,), out, back)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g, needs):
        if not needs[0]:
            return (None,)
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _record("gelu", (a,), out, back)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x - mu) / std
    out = xhat * gamma.data + beta.data

    def back(g, needs):
        lead = tuple(range(g.ndim - 1))
        ga = gg_ = gb = None
        if needs[1]:
            gg_ = (g * xhat).sum(axis=lead)
        if needs[2]:
            gb = g.sum(axis=lead)
        if needs[0]:
            gg = g * gamma.data
            ga = (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) / std
        return ga, gg_, gb

    return _record("layer_norm", (a, gamma, beta), out, back)


def embedding_lookup(table: Tensor, indices: Array) -> Tensor:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("embedding indices must be integers")
    out = table.data[idx].copy()

    def back(g, needs):
        if not needs[0]:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("embedding", (table,), out, back)


def extract_patches(images: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, gh*gw, C*patch*patch), row-major over the grid."""
    if images.data.ndim != 4:
        raise ShapeError(f"extract_patches needs (B, C, H, W), got {images.data.shape}")
    b, c, h, w = images.data.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    out = (
        images.data.reshape(b, c, gh, patch, gw, patch)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, gh * gw, c * patch * patch)
    )
    out = np.ascontiguousarray(out)

    def back(g, needs):
        if not needs[0]:
            return (None,)
        gi = (
            g.reshape(b, gh, gw, c, patch, patch)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(b, c, h, w)
        )
        return (np.ascontiguousarray(gi),)

    return _record("extract_patches", (images,), out, back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller decides train/eval by calling or not."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / (|a| + |n| + 1e-12). ``indices``
    restricts the numeric sweep to a subset of flat coordinates (default all).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    probe = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.data.size != 1:
            raise ShapeError(f"grad_check target must be scalar, got shape {y.data.shape}")
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("grad_check target evaluated to a non-finite value")
        backward(y, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = x.data.copy()
    flat = base.reshape(-1)
    scan = range(flat.size) if indices is None else indices
    worst = 0.0
    arg = Tensor(base)
    af = analytic.reshape(-1)
    for i in scan:
        orig = flat[i]
        arg.data.reshape(-1)[i] = orig + eps
        fp = f(arg).item()
        arg.data.reshape(-1)[i] = orig - eps
        fm = f(arg).item()
        arg.data.reshape(-1)[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(af[i] - numeric) / (abs(af[i]) + abs(numeric) + 1e-12)
        if err > worst:
            worst = err
    return worst
