"""Tape-based reverse-mode autodiff over fp64 numpy arrays.

Every primitive records its output on the tape of its inputs together with a
closure that maps the output cotangent to input cotangents. ``backward`` walks
the tape once in reverse node order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Gradient = dict[str, np.ndarray]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "node", "name")

    def __init__(self, data, tape: "Tape", node: int, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, node={self.node}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of primitive applications.

    ``nodes[i]`` is ``(kind, input_ids, backward_fn)``; the output id of entry
    ``i`` is ``i`` itself, so inputs always precede outputs.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None]] = []
        self.values: list[np.ndarray] = []
        self.params: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind, data, inputs=(), backward_fn=None, requires_grad=False, name=None) -> Tensor:
        node = len(self.nodes)
        self.nodes.append((kind, inputs, backward_fn))
        self.values.append(data)
        return Tensor(data, self, node, requires_grad, name)

    def param(self, name: str, array) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        data = np.asarray(array, dtype=np.float64)
        t = self._push("param", data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def const(self, array) -> Tensor:
        return self._push("const", np.asarray(array, dtype=np.float64))


class ParamView(Mapping):
    """Registers parameters on a tape on first access.

    Parameters that a forward pass never touches never enter the tape, which is
    how untouched task heads end up absent from a sub-batch gradient.
    """

    def __init__(self, tape: Tape, arrays: Mapping[str, np.ndarray], trainable: bool = True):
        self.tape = tape
        self.arrays = arrays
        self.trainable = trainable
        self._consts: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        if not self.trainable:
            t = self._consts.get(name)
            if t is None:
                t = self._consts[name] = self.tape.const(self.arrays[name])
            return t
        t = self.tape.params.get(name)
        if t is None:
            t = self.tape.param(name, self.arrays[name])
        return t

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    return Tape()


def as_tensor(x, tape: Tape | None = None) -> Tensor:
    if isinstance(x, Tensor):
        if tape is not None and x.tape is not tape:
            raise ValueError("tensor belongs to a different tape")
        return x
    return (tape or Tape()).const(x)


def _record(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ValueError(f"{kind}: inputs live on different tapes")
    rg = any(t.requires_grad for t in inputs)
    return tape._push(kind, data, tuple(t.node for t in inputs), backward_fn if rg else None, rg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    tape = _tape_of(a, b)
    return as_tensor(a, tape), as_tensor(b, tape)


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record("mul", (a, b), ad * bd, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_SQRT_2_OVER_PI * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record("gelu", (x,), out, bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log: non-positive input")
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


# --- reductions and normalisations ---------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _record("reduce_sum", (x,), out, lambda g: (np.broadcast_to(np.reshape(g, kshape), shape),))


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _record("reduce_mean", (x,), out, lambda g: (np.broadcast_to(np.reshape(g, kshape) / count, shape),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gd
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, bw)


# --- linear algebra and shape ops ----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    advanced = _is_advanced(key)

    def bw(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _record("getitem", (x,), x.data[key], bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max() if ids.max() >= vocab else ids.min())
        raise ValueError(f"embedding_lookup: token id {bad} outside vocabulary of size {vocab}")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _record("embedding_lookup", (table,), table.data[ids], bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", xs, np.concatenate([x.data for x in xs], axis=axis), bw)


# --- differentiation -----------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> Gradient:
    """Gradient of a scalar ``loss`` with respect to every parameter on ``tape``.

    Parameters registered on the tape but not reached from ``loss`` get zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones_like(loss.data)
    nodes = tape.nodes
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        _, inputs, fn = nodes[i]
        if fn is None:
            continue
        for j, gi in zip(inputs, fn(g)):
            if gi is None:
                continue
            # never updated in place, so aliasing views is safe
            grads[j] = gi if grads[j] is None else grads[j] + gi
    out: Gradient = {}
    for name, t in tape.params.items():
        g = grads[t.node] if t.node <= loss.node else None
        out[name] = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
    return out


def value_and_grad(loss_fn: Callable, params: Mapping[str, np.ndarray]) -> tuple[float, Gradient]:
    """Run ``loss_fn(view)`` on a fresh tape and differentiate it."""
    tape = Tape()
    view = ParamView(tape, params)
    loss = loss_fn(view)
    return float(loss), backward(tape, loss)


def grad_check(
    loss_fn: Callable,
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one parameter is ``|a - n| / max(|a|, |n|, 1e-8)`` with
    ``|.|`` the Euclidean norm over its checked coordinates; the result is the
    max over parameters. ``max_coords`` samples coordinates per parameter for
    large models.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    f0, analytic = value_and_grad(loss_fn, point)
    if not math.isfinite(f0):
        raise FloatingPointError("loss is not finite at the evaluation point")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else sorted(point):
        arr = point[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = _eval(loss_fn, point)
            flat[i] = old - eps
            fm = _eval(loss_fn, point)
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss when perturbing parameter {name!r} at index {int(i)}")
            num[n] = (fp - fm) / (2 * eps)
        ana = analytic[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def _eval(loss_fn, params) -> float:
    return float(loss_fn(ParamView(Tape(), params)))
