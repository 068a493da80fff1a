"""Dense tensors with a define-by-run tape for reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs include a tensor it is
watching. ``tape.backward(loss)`` walks the record in reverse, which is a valid
topological order because an operation can only consume tensors that already
exist. Tensors that were never watched carry no ``node_id`` and never receive
gradients.

Precision is a process-wide setting (``float32`` for training, ``float64`` for
gradient verification) rather than a per-tensor property.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = ["float32"]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision[0] = name


def get_precision() -> str:
    return _precision[0]


def get_dtype() -> type:
    return _DTYPES[_precision[0]]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """An n-dimensional array, optionally bound to a tape through ``node_id``."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_dtype())
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tracked = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Gradients:
    """Gradient map returned by :meth:`Tape.backward`.

    Indexing with a watched tensor returns its gradient; watched tensors the
    loss does not depend on get zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise KeyError("tensor is not watched by this tape")
        grad = self._grads.get(tensor.node_id)
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tape is self._tape and tensor.node_id is not None


class Tape:
    """Ordered operation record plus gradient storage keyed by ``node_id``."""

    def __init__(self):
        self.ops: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._next_id = 0

    def _new_id(self) -> int:
        node = self._next_id
        self._next_id += 1
        return node

    def watch(self, tensor: Tensor | np.ndarray) -> Tensor:
        """Return a tracked alias of ``tensor`` sharing its data.

        The original tensor is left untouched so long-lived parameters can be
        watched by a fresh tape on every forward pass.
        """
        data = tensor.data if isinstance(tensor, Tensor) else tensor
        alias = Tensor.__new__(Tensor)
        alias.data = np.ascontiguousarray(data, dtype=get_dtype())
        alias.node_id = self._new_id()
        alias.tape = self
        return alias

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.node_id = self._new_id()
        out.tape = self
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.ops.append((out.node_id, ids, vjp))
        return out

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, in_ids, vjp in reversed(self.ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for node, gi in zip(in_ids, vjp(g)):
                if node is None or gi is None:
                    continue
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
        return Gradients(grads, self)


def backward(loss: Tensor) -> Gradients:
    if loss.tape is None:
        raise ValueError("loss is not recorded on any tape")
    return loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            tape = t.tape
            break
    if tape is None:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.node_id = None
        out.tape = None
        return out
    return tape.record(data, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.tape is not None else None,
            _unbroadcast(g * ad, bd.shape) if b.tape is not None else None,
        )

    return _emit(ad * bd, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _emit(0.5 * xd * (1.0 + th), (x,), vjp)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _emit(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        da = db = None
        if a.tape is not None:
            da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.tape is not None:
            if ad.ndim > 2 and bd.ndim == 2:
                db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return da, db

    return _emit(ad @ bd, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"rms_norm gain shape {gain.shape} does not match last dim of {x.shape}")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * r

    def vjp(g):
        dgain = (g * normed).reshape(-1, gd.shape[0]).sum(axis=0) if gain.tape is not None else None
        dx = None
        if x.tape is not None:
            gy = g * gd
            dx = r * gy - normed * r * (gy * normed).mean(axis=-1, keepdims=True)
        return dx, dgain

    return _emit(normed * gd, (x, gain), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        d = (2.0 / n) * g * diff
        return d, (-d if target.tape is not None else None)

    return _emit(np.asarray((diff * diff).mean(), dtype=diff.dtype), (pred, target), vjp)


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ValueError(f"invalid transpose axes {axes} for {x.ndim}-d tensor")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"concat axis {axis} out of range for {ndim}-d tensors")
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ValueError(
                f"concat shape mismatch along axis {axis}: {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"slice axis {axis} out of range for {x.ndim}-d tensor")
    axis %= x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] out of bounds for axis of length {x.shape[axis]}")
    index = (np.s_[:],) * axis + (np.s_[start:stop],)
    shape, dtype = x.shape, x.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.data[index]), (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _emit(
        np.ascontiguousarray(np.broadcast_to(x.data, shape)),
        (x,),
        lambda g: (_unbroadcast(g, old),),
    )


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs ``(x[2j], x[2j+1])`` of the last axis.

    ``cos``/``sin`` have the last axis halved and broadcast against ``x``.
    """
    xd = x.data
    if xd.shape[-1] % 2:
        raise ValueError(f"rotate_pairs needs an even last dim, got {xd.shape[-1]}")
    pairs = xd.reshape(*xd.shape[:-1], -1, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), axis=-1).reshape(xd.shape)

    def vjp(g):
        gp = g.reshape(*g.shape[:-1], -1, 2)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack((g0 * cos + g1 * sin, g1 * cos - g0 * sin), axis=-1).reshape(g.shape),)

    return _emit(out, (x,), vjp)


# Names exercised by the finite-difference suite.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "silu",
    "matmul",
    "sum",
    "mean",
    "softmax",
    "rms_norm",
    "mse_loss",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "broadcast_to",
    "rotate_pairs",
)


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    The per-element error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    ``floor`` keeps entries whose true gradient is zero from dividing by zero.
    Run under ``precision("float64")`` for meaningful results.
    """
    arrays = [np.array(a, dtype=get_dtype()) for a in inputs]
    tape = Tape()
    watched = [tape.watch(a) for a in arrays]
    loss = f(*watched)
    grads = tape.backward(loss)
    worst = 0.0
    for arr, w in zip(arrays, watched):
        analytic = grads[w]
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = float(f(*[Tensor(a) for a in arrays]).data)
            flat[j] = keep - h
            down = float(f(*[Tensor(a) for a in arrays]).data)
            flat[j] = keep
            numeric[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
