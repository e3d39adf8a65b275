import numpy as np
import pytest

from volvlm import tensor as T


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
        it.iternext()
    return g


SCALE_FLOOR = 1e-3


def rel_error(a, b, scale=None):
    """Max elementwise |a - b| / max(|a|, |b|, SCALE_FLOOR * scale).

    ``scale`` is the gradient scale of the whole check (default max|b|).
    Entries far below it are measured against it: at eps=1e-5 their
    finite-difference value is round-off, not signal.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if not a.size:
        return 0.0
    if scale is None:
        scale = float(np.max(np.abs(b)))
    floor = max(SCALE_FLOOR * scale, 1e-12)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def gradcheck(build, inputs, eps=1e-5):
    """Compare autodiff and finite-difference gradients of ``sum(build(*ts) * w)``
    for every float64 input array; returns the max relative error."""
    rng = np.random.default_rng(12345)
    ts = [T.Tensor(a, requires_grad=True) for a in inputs]
    out = build(*ts)
    w = rng.normal(size=out.shape)

    def f():
        with T.no_grad():
            return float(np.sum(build(*[T.Tensor(a) for a in inputs]).data * w))

    loss = T.sum_(out * w)
    T.backward(loss, ts)
    worst = 0.0
    for a, t in zip(inputs, ts):
        worst = max(worst, rel_error(t.grad, numeric_grad(f, a, eps)))
    return worst


def module_gradcheck(module, loss_fn, eps=1e-5, max_entries=40, seed=0):
    """Finite-difference check on (a random subset of) every parameter entry."""
    params = module.parameters()
    for p in params:
        p.grad = None
    loss = loss_fn()
    T.backward(loss, params)
    rng = np.random.default_rng(seed)
    pairs = []
    for p in params:
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        ana = p.grad.reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            with T.no_grad():
                fp = float(loss_fn().data)
            flat[i] = old - eps
            with T.no_grad():
                fm = float(loss_fn().data)
            flat[i] = old
            num[j] = (fp - fm) / (2 * eps)
        pairs.append((ana, num))
    scale = max(float(np.max(np.abs(n))) for _, n in pairs)
    return max(rel_error(a, n, scale) for a, n in pairs), scale


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from volvlm.phantom import generate_dataset

    out = tmp_path_factory.mktemp("data")
    generate_dataset(out, 20, seed=3)
    return out
