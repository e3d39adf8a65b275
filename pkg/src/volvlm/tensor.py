"""Dense tensors with reverse-mode automatic differentiation.

Each op computes its forward value eagerly with numpy and, when any input
requires a gradient, records a closure mapping the output gradient to one
gradient per parent. ``backward`` walks the recorded graph once in reverse
topological order.

Set ``VOLVLM_DEBUG=1`` to check every forward result for NaN/Inf.
"""
from __future__ import annotations

import contextlib
import os
import threading

import numpy as np

from . import kernels

DEBUG = os.environ.get("VOLVLM_DEBUG", "0") == "1"

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional sub-stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None and requires_grad:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, leaves=None):
        backward(self, leaves)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if DEBUG and out.data.dtype.kind == "f" and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype if a.dtype.kind == "f" else None))
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw, "div")


def gelu(x):
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data)
    return _result(kernels.gelu_fwd(flat), (x,), lambda g: (kernels.gelu_bwd(g, flat),), "gelu")


def dropout(x, p, rng, training=True):
    """Inverted dropout; identity when ``p == 0`` or not training."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def amax(x, axis):
    """Max over one axis; ties send the gradient to the first maximal entry."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _result(out, (x,), bw, "amax")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a, b):
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def index(x, idx):
    """Basic (slice) indexing."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _result(x.data[idx], (x,), bw, "index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tensors, bw, "concat")


def take(x, indices, axis=0):
    """``np.take`` along one axis; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def bw(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        go = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(gm, indices, go)
        return (gx,)

    return _result(np.take(x.data, indices, axis=axis), (x,), bw, "take")


def embedding(weight, ids):
    """Row lookup ``weight[ids]``."""
    return take(weight, ids, axis=0)


def gather(x, indices, axis, unique=False):
    """``np.take_along_axis`` semantics; ``indices`` broadcasts on the other axes.

    ``unique=True`` promises no index repeats along ``axis`` (a faster backward).
    """
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take_along_axis(x.data, indices, axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        if unique:
            np.put_along_axis(gx, indices, g, axis)
            return (gx,)
        full = np.broadcast_to(indices, g.shape)
        grids = list(np.ix_(*[np.arange(n) for n in g.shape]))
        grids[axis] = full
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return _result(out, (x,), bw, "gather")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _blocks(x, k):
    """(B, C, H, W, D) -> (B, H/k, W/k, D/k, C, k, k, k) view."""
    B, C, H, W, D = x.shape
    v = x.reshape(B, C, H // k, k, W // k, k, D // k, k)
    return v.transpose(0, 2, 4, 6, 1, 3, 5, 7)


def conv3d(x, weight, bias=None, stride=None):
    """3D convolution with cubic kernel k, stride k and no padding.

    x: (B, C, H, W, D); weight: (C', C, k, k, k); bias: (C',).
    Returns (B, C', H/k, W/k, D/k).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5D input and kernel, got {x.shape} and {weight.shape}")
    Co, Ci, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {weight.shape[2:]}")
    if stride is not None and stride != k:
        raise ShapeError(f"conv3d: only stride == kernel size is supported (k={k}, stride={stride})")
    B, C, H, W, D = x.shape
    if C != Ci:
        raise ShapeError(f"conv3d: input channels {C} != kernel channels {Ci}")
    if H % k or W % k or D % k:
        raise ShapeError(f"conv3d: kernel {k} does not divide spatial dims {(H, W, D)}")
    Ho, Wo, Do = H // k, W // k, D // k
    cols = _blocks(x.data, k).reshape(B * Ho * Wo * Do, C * k ** 3)
    wmat = weight.data.reshape(Co, C * k ** 3)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(B, Ho, Wo, Do, Co).transpose(0, 4, 1, 2, 3)

    def bw(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, Co)
        gx = gw = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, Ho, Wo, Do, C, k, k, k)
            gx = gcols.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(x.shape)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, bw, "conv3d")


# --------------------------------------------------------------------------
# normalization, attention pieces, losses
# --------------------------------------------------------------------------


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    x = as_tensor(x)
    shape = x.shape
    flat = np.ascontiguousarray(x.data.reshape(-1, shape[-1]))
    xhat, rstd = kernels.layer_norm_fwd(flat, eps)
    out = xhat.reshape(shape)
    parents = [x]
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        out = out * gamma.data + beta.data
        parents += [gamma, beta]

    def bw(g):
        g2 = g.reshape(-1, shape[-1])
        grads = []
        dxhat = g2 * gamma.data if gamma is not None else g2
        grads.append(kernels.layer_norm_bwd(np.ascontiguousarray(dxhat), xhat, rstd).reshape(shape)
                     if x.requires_grad else None)
        if gamma is not None:
            grads.append((g2 * xhat).sum(axis=0))
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw, "layer_norm")


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    mshape = moved.shape
    y = kernels.softmax_fwd(np.ascontiguousarray(moved.reshape(-1, mshape[-1])))

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, mshape[-1]))
        gx = kernels.softmax_bwd(gm, y)
        return (np.moveaxis(gx.reshape(mshape), -1, axis),)

    return _result(np.moveaxis(y.reshape(mshape), -1, axis), (x,), bw, "softmax")


def mse_loss(pred, target):
    """Mean of squared differences over all elements."""
    pred = as_tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return (d if pred.requires_grad else None, -d if target.requires_grad else None)

    return _result(np.asarray((diff * diff).sum() / n, dtype=pred.dtype), (pred, target), bw, "mse_loss")


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``.

    ``weights`` (same shape as targets) selects/weights positions; the result
    is ``sum(w * nll) / sum(w)``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions selected")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp_t = z[np.arange(len(t)), t] - m[:, 0] - np.log(s[:, 0])
    loss = -(w * logp_t).sum() / total

    def bw(g):
        p = e / s
        p[np.arange(len(t)), t] -= 1.0
        return ((p * (w / total)[:, None] * g).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves=None):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Tensors listed in
    ``leaves`` that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if leaves is not None:
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
