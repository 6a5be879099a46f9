"""Small reverse-mode autodiff engine over numpy arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the result remembers its parents and a closure that maps the
upstream gradient to one gradient per parent. :meth:`Tensor.backward` walks
that graph once in reverse topological order.

Values are float32 by default; wrap gradient checks in ``precision("float64")``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NumericError",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "make_op",
    "add",
    "mul",
    "matmul",
    "concat",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "dropout",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "adaptive_avg_pool2d",
    "batch_norm2d",
    "layer_norm",
    "scaled_dot_attention",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward value."""


_dtype = np.float32
_grad_enabled = True


def get_default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype newly created tensors are cast to."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """n-dimensional real array with an optional gradient."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- array protocol ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every tensor reachable from this scalar.

        Leaf gradients accumulate across calls; intermediate tensors get the
        gradient of the current pass only.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node._op}")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def swap_last(self) -> Tensor:
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return transpose(self, axes)

    def flatten(self, start: int = 1) -> Tensor:
        return reshape(self, self.shape[:start] + (-1,))

    def relu(self) -> Tensor:
        return relu(self)

    def exp(self) -> Tensor:
        return texp(self)

    def log(self) -> Tensor:
        return tlog(self)

    def expand(self, *shape) -> Tensor:
        return expand(self, tuple(shape))


class Parameter(Tensor):
    """A trainable leaf tensor owned by a module."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap a forward result and its backward rule into a graph node."""
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_op(a.data + np.asarray(b, a.dtype), (a,), lambda g: (g,), "add")
    _broadcast_shape(a.shape, b.shape, "add")
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def _neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, a.dtype)
        return make_op(a.data * c, (a,), lambda g: (g * c,), "mul")
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward, "mul")


# out-of-domain inputs surface as NumericError from make_op, not as numpy warnings
def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return make_op(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_op(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, so safe for gradient checks."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_op(out, (a,), backward, "gelu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out, a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    _broadcast_shape(a.shape, shape, "expand")
    out = np.broadcast_to(a.data, shape).copy()
    return make_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(
        out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat"
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast along size 1."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim:
        raise ShapeError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), backward, "log_softmax")


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernel: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 2D cross-correlation. x: NCHW, kernel: FCkk.

    Internally channels-last: the kh*kw shifted views of the padded input are
    stacked into one (N*H*W, kh*kw*C) matrix and multiplied by the kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FCkk kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {kernel.shape}")
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
    for t, (i, j) in enumerate(offsets):
        cols[:, :, :, t, :] = xp[:, i : i + ho, j : j + wo, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, ho, wo, kh * kw, c)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, (i, j) in enumerate(offsets):
                gxp[:, i : i + ho, j : j + wo, :] += gcols[:, :, :, t, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return gx, gk

    return make_op(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def _pool_windows(x: Tensor, k: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"pooling window {k} larger than spatial dims {(h, w)}")
    ho, wo = h // k, w // k
    win = x.data[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    return win, ho, wo


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling with floor on odd sizes.

    The gradient goes to the first maximal element (row-major) of each window.
    """
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"pooling window {k} larger than spatial dims {(h, w)}")
    ho, wo = h // k, w // k
    taps = [x.data[:, :, i : ho * k : k, j : wo * k : k] for i in range(k) for j in range(k)]
    out = taps[0].copy()
    for tap in taps[1:]:
        np.maximum(out, tap, out=out)

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for t, tap in enumerate(taps):
            hit = (tap == out) & ~taken
            taken |= hit
            i, j = divmod(t, k)
            gx[:, :, i : ho * k : k, j : wo * k : k] = g * hit
        return (gx,)

    return make_op(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    win, ho, wo = _pool_windows(x, k)
    out = win.mean(axis=-1)

    def backward(g):
        n, c, h, w = x.shape
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        gx[:, :, : ho * k, : wo * k] = spread
        return (gx,)

    return make_op(out, (x,), backward, "avg_pool2d")


def _adaptive_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        start = (i * size) // out
        stop = -((-(i + 1) * size) // out)
        m[i, start:stop] = 1.0 / (stop - start)
    return m


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average pool onto a fixed grid using the usual floor/ceil bin edges."""
    ph = _adaptive_matrix(x.shape[2], out_hw[0], x.dtype)
    pw = _adaptive_matrix(x.shape[3], out_hw[1], x.dtype)
    out = ph @ x.data @ pw.T
    return make_op(out, (x,), lambda g: (ph.T @ g @ pw,), "adaptive_avg_pool2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of an NCHW batch.

    In train mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as torch does).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm2d parameters must have length {c}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ShapeError("batch_norm2d on an empty batch")
    axes = (0, 2, 3)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            if train:
                gx = (inv_std.reshape(1, c, 1, 1) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), backward, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have length {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = (inv_std / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    k_scale: Tensor | None = None,
    v_scale: Tensor | None = None,
) -> Tensor:
    """softmax(q kᵀ / √d) v over the last two axes.

    ``k_scale`` and ``v_scale`` rescale keys and values per feature before use
    (the IA3 hook); they must broadcast against ``k``/``v`` along size-1 axes.
    """
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention head dimension is zero")
    if not (q.shape[-1] == k.shape[-1] and k.shape[-2] == v.shape[-2]):
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if k_scale is not None:
        k = k * k_scale
    if v_scale is not None:
        v = v * v_scale
    scores = matmul(q, k.swap_last()) * (1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns max |analytic - numeric| / max(1, |numeric|) over the checked
    flat coordinates (all of them unless ``coords`` is given).
    """
    x.grad = None
    x.requires_grad = True
    f(x).backward()
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    x.grad = None
    return worst
