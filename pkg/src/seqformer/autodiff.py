"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their inputs and a backward closure; :func:`backward` walks
that record in reverse topological order and accumulates gradients into the
leaf tensors. A recorded graph is consumed by one backward pass.

Shapes follow numpy conventions; time-series tensors are ``(..., T, C)``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float64
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf reaches a finiteness checkpoint."""


class StaleTapeError(RuntimeError):
    """Raised when backward runs over a graph that was already consumed."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)


def make_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``grad_fn(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def index_select(a, index) -> Tensor:
    """Basic (slice/int) indexing. Fancy indexing goes through :func:`gather`."""
    a = as_tensor(a)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_op(np.array(a.data[index]), (a,), grad_fn, "index")


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    A 1-D operand is promoted to a row (left) or column (right) and the
    added axis is dropped from the result, as in numpy.
    """
    a, b = _pair(a, b)
    if a.ndim == 1 and b.ndim >= 2:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1 and a.ndim >= 2:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_op(np.matmul(a.data, b.data), (a, b), grad_fn, "matmul")


# -- nonlinearities -----------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return make_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return make_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg_branch = alpha * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg_branch)
    return make_op(out, (x,), lambda g: (g * np.where(pos, 1.0, neg_branch + alpha),), "elu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


_ACTIVATIONS = {"gelu": gelu, "elu": elu, "relu": relu}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# -- sequence ops -------------------------------------------------------

def _conv_padding(padding, k: int) -> tuple[int, int]:
    if padding == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if padding in (None, "valid"):
        return 0, 0
    if isinstance(padding, int) and padding >= 0:
        return padding, padding
    if isinstance(padding, tuple) and len(padding) == 2:
        return int(padding[0]), int(padding[1])
    raise ValueError(f"bad padding {padding!r}")


def conv1d(x, kernels, bias=None, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlation along time.

    ``x`` is ``(..., T, Cin)``, ``kernels`` is ``(Cout, Cin, K)``; the result
    is ``(..., T', Cout)`` with ``T' = (T + pad_total - K) // stride + 1``.
    ``padding="same"`` requires ``stride == 1`` and keeps ``T' == T``.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels, dtype=x.dtype)
    if kernels.ndim != 3 or x.ndim < 2 or kernels.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv1d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    cout, cin, k = kernels.shape
    if padding == "same" and stride != 1:
        raise ValueError("'same' padding requires stride 1")
    left, right = _conv_padding(padding, k)
    t = x.shape[-2]
    padded_len = t + left + right
    if k > padded_len:
        raise ShapeError(f"kernel width {k} exceeds padded input length {padded_len}")
    pad_width = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad_width)
    # windows: (..., T'', Cin, K) for stride 1, then subsample
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)[..., ::stride, :, :]
    out = np.einsum("...tck,ock->...to", win, kernels.data)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        out = out + bias.data
        parents.append(bias)
    t_out = out.shape[-2]

    def grad_fn(g):
        gx = gk = gb = None
        if x.requires_grad:
            gwin = np.einsum("...to,ock->...tck", g, kernels.data)
            gxp = np.zeros_like(xp)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[..., j:j + span:stride, :] += gwin[..., j]
            gx = gxp[..., left:left + t, :]
        if kernels.requires_grad:
            gk = np.einsum("ntck,nto->ock", win.reshape((-1,) + win.shape[-3:]), g.reshape(-1, t_out, cout))
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return make_op(out, parents, grad_fn, "conv1d")


def pool(x, kind: str) -> Tensor:
    """Reduce over the time axis (``-2``): ``max_over_time`` or ``mean_over_time``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"pool needs at least one time step, got shape {x.shape}")
    if kind == "mean_over_time":
        return mean(x, axis=-2)
    if kind != "max_over_time":
        raise ValueError(f"unknown pool kind {kind!r}")
    idx = np.argmax(x.data, axis=-2)  # first occurrence on ties
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return make_op(out, (x,), grad_fn, "max_pool")


def gather(w, indices, axis: int = -1) -> Tensor:
    """``out[..., n, ...] = w[..., indices[n], ...]`` along ``axis``.

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    w = as_tensor(w)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather indices must be integers")
    axis = axis % w.ndim
    extent = w.shape[axis]
    bad = idx[(idx < 0) | (idx >= extent)]
    if bad.size:
        raise IndexError(f"gather index {int(bad.flat[0])} out of range [0, {extent})")
    out = np.take(w.data, idx, axis=axis)

    def grad_fn(g):
        gw = np.zeros_like(w.data)
        wm = np.moveaxis(gw, axis, 0)
        # g has idx dims in place of `axis`; move them to the front
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(wm, idx, gm)
        return (gw,)

    return make_op(out, (w,), grad_fn, "gather")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, dtype=x.dtype)
    beta = as_tensor(beta, dtype=x.dtype)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return make_op(out, (x, gamma, beta), grad_fn, "layer_norm")


def l2_norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the zero vector is 0."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def grad_fn(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.where(denom > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return make_op(out, (x,), grad_fn, "l2_norm")


def dropout(x, rate: float, rng=None) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with rate > 0 needs an explicit rng")
    keep = (rng.uniform(size=x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def check_finite(x, name: str = "tensor") -> Tensor:
    """Checkpoint: raise :class:`NumericalError` instead of passing NaN/Inf on."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite values in {name}")
    return x


# -- reverse pass -------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, producers before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise StaleTapeError("graph already consumed by a previous backward pass; run a new forward")
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it, seeding ``d loss = 1``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleTapeError("backward already run for this loss; run a new forward")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference checking -----------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps structurally zero gradients (e.g. a key bias under
    softmax) from dividing difference-quotient roundoff by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_coords: int | None = None, rng=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` rebuilds the graph from ``inputs`` on every call. With
    ``max_coords`` only that many entries per input are probed, chosen by
    ``rng`` (a :class:`seqformer.rng.Rng`).

    The relative-error floor is ``1e-6 * max(1, |f|)``: a difference
    quotient of ``f`` carries roundoff near ``eps * |f| / h``, so gradient
    entries below that scale cannot be resolved to relative precision.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    floor = 1e-6 * max(1.0, abs(float(loss.data)))
    backward(loss)
    worst = 0.0
    for t in inputs:
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, max_coords))
        num = numerical_gradient(fn, t, h=h, coords=coords)
        ana = np.zeros_like(t.data) if t.grad is None else t.grad
        if coords is not None:
            ana = ana.reshape(-1)[coords]
            num = num.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num, floor))
    return worst
