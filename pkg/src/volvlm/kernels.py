"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` loop and a pure-numpy path.
Which one the rest of the package calls is decided once at import time by
the ``VOLVLM_NUMBA`` environment variable: ``0`` forces numpy, ``1`` forces
numba, unset/``auto`` takes the faster path per kernel. Both paths are
importable directly (``*_nb`` / ``*_np``) so tests and the benchmark can
compare them side by side.

All row kernels take 2D C-contiguous arrays of shape (rows, cols) and work
on the last axis.
"""
import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

# "auto" (default), "1" = numba everywhere, "0" = numpy everywhere
MODE = os.environ.get("VOLVLM_NUMBA", "auto").strip().lower()

_GELU_C = math.sqrt(2.0 / math.pi)


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# trilinear resampling
# --------------------------------------------------------------------------


def _axis_weights(n_in, n_out, step):
    """Lower index, upper weight and in-bounds flag for one axis.

    ``step`` is target_spacing / source_spacing, i.e. output index j sits at
    input coordinate j * step.
    """
    coord = np.arange(n_out, dtype=np.float64) * step
    inside = coord <= (n_in - 1) + 1e-9
    if n_in == 1:
        lo = np.zeros(n_out, dtype=np.int64)
        frac = np.zeros(n_out, dtype=np.float64)
    else:
        lo = np.minimum(np.floor(coord).astype(np.int64), n_in - 2)
        frac = np.clip(coord - lo, 0.0, 1.0)
    return lo, frac, inside


def resample_trilinear_np(src, out_shape, steps, fill):
    nx, ny, nz = src.shape
    ox, oy, oz = out_shape
    lx, fx, ix = _axis_weights(nx, ox, steps[0])
    ly, fy, iy = _axis_weights(ny, oy, steps[1])
    lz, fz, iz = _axis_weights(nz, oz, steps[2])
    hx = np.minimum(lx + 1, nx - 1)
    hy = np.minimum(ly + 1, ny - 1)
    hz = np.minimum(lz + 1, nz - 1)

    # separable lerp, x then y then z; same operation order as the numba loop
    fxb = fx[:, None, None]
    a = src[lx][:, ly][:, :, lz]
    b = src[hx][:, ly][:, :, lz]
    c00 = a + (b - a) * fxb
    a = src[lx][:, hy][:, :, lz]
    b = src[hx][:, hy][:, :, lz]
    c10 = a + (b - a) * fxb
    a = src[lx][:, ly][:, :, hz]
    b = src[hx][:, ly][:, :, hz]
    c01 = a + (b - a) * fxb
    a = src[lx][:, hy][:, :, hz]
    b = src[hx][:, hy][:, :, hz]
    c11 = a + (b - a) * fxb
    fyb = fy[None, :, None]
    c0 = c00 + (c10 - c00) * fyb
    c1 = c01 + (c11 - c01) * fyb
    out = c0 + (c1 - c0) * fz[None, None, :]
    inside = ix[:, None, None] & iy[None, :, None] & iz[None, None, :]
    return np.where(inside, out, fill)


@_njit
def _resample_loop(src, ox, oy, oz, sx, sy, sz, fill):
    nx, ny, nz = src.shape
    out = np.empty((ox, oy, oz), dtype=np.float64)
    for i in range(ox):
        cx = i * sx
        if cx > (nx - 1) + 1e-9:
            out[i, :, :] = fill
            continue
        if nx == 1:
            x0 = 0
            tx = 0.0
        else:
            x0 = min(int(math.floor(cx)), nx - 2)
            tx = min(max(cx - x0, 0.0), 1.0)
        x1 = min(x0 + 1, nx - 1)
        for j in range(oy):
            cy = j * sy
            if cy > (ny - 1) + 1e-9:
                out[i, j, :] = fill
                continue
            if ny == 1:
                y0 = 0
                ty = 0.0
            else:
                y0 = min(int(math.floor(cy)), ny - 2)
                ty = min(max(cy - y0, 0.0), 1.0)
            y1 = min(y0 + 1, ny - 1)
            for k in range(oz):
                cz = k * sz
                if cz > (nz - 1) + 1e-9:
                    out[i, j, k] = fill
                    continue
                if nz == 1:
                    z0 = 0
                    tz = 0.0
                else:
                    z0 = min(int(math.floor(cz)), nz - 2)
                    tz = min(max(cz - z0, 0.0), 1.0)
                z1 = min(z0 + 1, nz - 1)
                a = src[x0, y0, z0]
                c00 = a + (src[x1, y0, z0] - a) * tx
                a = src[x0, y1, z0]
                c10 = a + (src[x1, y1, z0] - a) * tx
                a = src[x0, y0, z1]
                c01 = a + (src[x1, y0, z1] - a) * tx
                a = src[x0, y1, z1]
                c11 = a + (src[x1, y1, z1] - a) * tx
                c0 = c00 + (c10 - c00) * ty
                c1 = c01 + (c11 - c01) * ty
                out[i, j, k] = c0 + (c1 - c0) * tz
    return out


def resample_trilinear_nb(src, out_shape, steps, fill):
    src = np.ascontiguousarray(src, dtype=np.float64)
    ox, oy, oz = (int(n) for n in out_shape)
    return _resample_loop(src, ox, oy, oz, float(steps[0]), float(steps[1]),
                          float(steps[2]), float(fill))


# --------------------------------------------------------------------------
# layer norm
# --------------------------------------------------------------------------


def layer_norm_fwd_np(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


@_njit
def layer_norm_fwd_nb(x, eps):
    rows, cols = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += x[r, c]
        mu = s / cols
        v = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            v += d * d
        inv = 1.0 / math.sqrt(v / cols + eps)
        rstd[r] = inv
        for c in range(cols):
            xhat[r, c] = (x[r, c] - mu) * inv
    return xhat, rstd


def layer_norm_bwd_np(dxhat, xhat, rstd):
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[:, None]


@_njit
def layer_norm_bwd_nb(dxhat, xhat, rstd):
    rows, cols = xhat.shape
    dx = np.empty_like(xhat)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            m1 += dxhat[r, c]
            m2 += dxhat[r, c] * xhat[r, c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            dx[r, c] = (dxhat[r, c] - m1 - xhat[r, c] * m2) * rstd[r]
    return dx


# --------------------------------------------------------------------------
# softmax over the last axis
# --------------------------------------------------------------------------


def softmax_fwd_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


@_njit
def softmax_fwd_nb(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            y[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            y[r, c] *= inv
    return y


def softmax_bwd_np(dy, y):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


@_njit
def softmax_bwd_nb(dy, y):
    rows, cols = y.shape
    dx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += dy[r, c] * y[r, c]
        for c in range(cols):
            dx[r, c] = y[r, c] * (dy[r, c] - dot)
    return dx


# --------------------------------------------------------------------------
# GELU, tanh approximation written as x * sigmoid(2u)
# --------------------------------------------------------------------------


def gelu_fwd_np(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-2.0 * u))


def gelu_bwd_np(dy, x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-2.0 * u))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (sig + x * sig * (1.0 - sig) * 2.0 * du)


@_njit
def _gelu_fwd_flat(x, out):
    for i in range(x.size):
        v = x[i]
        u = 0.7978845608028654 * (v + 0.044715 * v * v * v)
        out[i] = v / (1.0 + math.exp(-2.0 * u))


@_njit
def _gelu_bwd_flat(dy, x, out):
    for i in range(x.size):
        v = x[i]
        u = 0.7978845608028654 * (v + 0.044715 * v * v * v)
        sig = 1.0 / (1.0 + math.exp(-2.0 * u))
        du = 0.7978845608028654 * (1.0 + 3 * 0.044715 * v * v)
        out[i] = dy[i] * (sig + v * sig * (1.0 - sig) * 2.0 * du)


def gelu_fwd_nb(x):
    out = np.empty_like(x)
    _gelu_fwd_flat(np.ascontiguousarray(x).ravel(), out.ravel())
    return out


def gelu_bwd_nb(dy, x):
    out = np.empty_like(x)
    _gelu_bwd_flat(np.ascontiguousarray(dy).ravel(), np.ascontiguousarray(x).ravel(), out.ravel())
    return out


# Which path each kernel takes. "auto" picks per kernel from the benchmark in
# benchmarks/bench_kernels.py: numba's scalar exp is not vectorized, so the
# exp-bound kernels stay on numpy while loop-bound kernels use numba.
_AUTO = {"resample_trilinear": "nb", "layer_norm_fwd": "nb", "layer_norm_bwd": "nb",
         "softmax_fwd": "np", "softmax_bwd": "nb", "gelu_fwd": "np", "gelu_bwd": "np"}


def _select(name):
    if MODE == "0" or not HAS_NUMBA:
        return globals()[name + "_np"]
    if MODE == "1":
        return globals()[name + "_nb"]
    return globals()[f"{name}_{_AUTO[name]}"]


resample_trilinear = _select("resample_trilinear")
layer_norm_fwd = _select("layer_norm_fwd")
layer_norm_bwd = _select("layer_norm_bwd")
softmax_fwd = _select("softmax_fwd")
softmax_bwd = _select("softmax_bwd")
gelu_fwd = _select("gelu_fwd")
gelu_bwd = _select("gelu_bwd")


def active_paths():
    """Kernel name -> 'numba' or 'numpy' for the current process."""
    return {name: ("numba" if globals()[name] is globals()[name + "_nb"] else "numpy") for name in _AUTO}
