import json
import os
import subprocess
import sys

import numpy as np
import pytest

from volvlm import kernels as K


def _rows(rng, dtype):
    return (rng.normal(size=(37, 19)) * 3).astype(dtype)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_row_kernels_agree(dtype, tol):
    rng = np.random.default_rng(0)
    x, dy = _rows(rng, dtype), _rows(rng, dtype)
    for name in ("softmax_fwd", "gelu_fwd"):
        a, b = getattr(K, name + "_np")(x), getattr(K, name + "_nb")(x)
        assert a.dtype == b.dtype == dtype
        assert np.allclose(a, b, atol=tol, rtol=tol), name
    y = K.softmax_fwd_np(x)
    assert np.allclose(K.softmax_bwd_np(dy, y), K.softmax_bwd_nb(dy, y), atol=tol, rtol=tol)
    assert np.allclose(K.gelu_bwd_np(dy, x), K.gelu_bwd_nb(dy, x), atol=tol, rtol=tol)
    fa, fb = K.layer_norm_fwd_np(x, 1e-5), K.layer_norm_fwd_nb(x, 1e-5)
    for a, b in zip(fa, fb):
        assert np.allclose(a, b, atol=tol, rtol=tol)
    xhat, rstd = fa
    assert np.allclose(K.layer_norm_bwd_np(dy, xhat, rstd), K.layer_norm_bwd_nb(dy, xhat, rstd), atol=tol, rtol=tol)


def test_resample_paths_agree():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(9, 7, 5)) * 100
    a = K.resample_trilinear_np(src, (12, 9, 7), (0.7, 0.75, 0.66), -1000.0)
    b = K.resample_trilinear_nb(src, (12, 9, 7), (0.7, 0.75, 0.66), -1000.0)
    assert np.allclose(a, b, atol=1e-9)


def test_softmax_rows_sum_to_one():
    y = K.softmax_fwd(np.random.default_rng(2).normal(size=(5, 8)) * 50)
    assert np.allclose(y.sum(axis=1), 1.0)


def _paths_under(flag):
    code = "import json; from volvlm import kernels as K; print(json.dumps(K.active_paths()))"
    env = {**os.environ, "VOLVLM_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    return json.loads(out.stdout)


def test_env_flag_selects_path():
    assert set(_paths_under("0").values()) == {"numpy"}
    assert set(_paths_under("1").values()) == {"numba"}
    auto = _paths_under("auto")
    assert auto == {k: ("numba" if v == "nb" else "numpy") for k, v in K._AUTO.items()}
