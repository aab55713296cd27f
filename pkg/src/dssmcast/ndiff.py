"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the output records its parents and a closure that maps the output
gradient to input gradients.  :meth:`Tensor.backward` walks the recorded graph
once in reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "Tensor",
    "tensor",
    "from_op",
    "matmul",
    "conv2d",
    "layer_norm",
    "softmax",
    "relu",
    "softplus",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "sqrt",
    "reciprocal",
    "reduce_sum",
    "reduce_mean",
    "transpose",
    "concat",
    "stack",
    "reshape",
    "clamp_min",
    "grad_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ---------------------------------------------------------
    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    post.reverse()
    return post


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str = "") -> Tensor:
    """Wrap a precomputed array as the output of a differentiable operation.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: denominator contains zero")
    out = a.data / b.data
    return from_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return from_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        if np.any(out == 0.0):
            raise ZeroDivisionError("sqrt: gradient undefined at 0")
        return (0.5 * g / out,)

    return from_op(out, (x,), backward, "sqrt")


def reciprocal(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data == 0.0):
        raise ZeroDivisionError("reciprocal: input contains zero")
    out = 1.0 / x.data
    return from_op(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0  # subgradient at exactly 0 is 0
    return from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return from_op(out, (x,), lambda g: (g * sig,), "softplus")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) with zero gradient wherever the floor is active."""
    x = _as_tensor(x)
    keep = x.data > floor
    return from_op(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


# -- reductions and structure -------------------------------------------
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return from_op(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return reduce_sum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim >= 2:
            axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return from_op(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return from_op(out, ts, lambda g: np.split(g, sizes, axis=axis), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            "stack: incompatible shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    n = len(ts)
    return from_op(
        out,
        ts,
        lambda g: [np.take(g, i, axis=axis) for i in range(n)],
        "stack",
    )


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(out, (a, b), backward, "matmul")


def conv2d(x, kernels, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``; ``kernels`` is
    ``C_out x C_in x k x k``.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks for input {x.shape} and kernels {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernels {kernels.shape} expect {k_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # patches: n, c_in, h_out, w_out, kh, kw
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", patches, kernels.data, optimize=True)
    h_out, w_out = out.shape[2], out.shape[3]

    def backward(g):
        gd = g if batched else g[None]
        gk = None
        if kernels.requires_grad:
            gk = np.einsum("nchwij,nohw->ocij", patches, gd, optimize=True)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h_out, j : j + w_out] += np.einsum(
                        "nohw,oc->nchw", gd, kernels.data[:, :, i, j], optimize=True
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
            if not batched:
                gx = gx[0]
        return gx, gk

    return from_op(out if batched else out[0], (x, kernels), backward, "conv2d")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return from_op(out, (x, gain, bias), backward, "layer_norm")


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = _as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return from_op(out, (x,), backward, "softmax")


# -- verification --------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    floor: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Worst per-coordinate relative error between reverse-mode and central-difference gradients.

    The relative error of coordinate ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``,
    so coordinates whose true derivative is ~0 are compared absolutely at ``floor``.
    ``coords`` restricts the finite-difference sweep to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    p = Tensor(base, requires_grad=True)
    y = f(p)
    if y.data.size != 1 or not np.isfinite(y.data).all():
        raise ValueError("grad_check: f must return a finite scalar")
    y.backward()
    analytic = p.grad.ravel()
    flat = base.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"grad_check: non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
