import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volvlm import tensor as T
from volvlm.mae import ConfigError, PatchGrid, TokenBatch
from volvlm.perceiver import (KINDS, PerceiverSpec, build_perceiver, check_grid, param_count, perceive, to_3d,
                              to_blocks, to_sequence)

from gradcases import perceiver_error

TOY_GRID = PatchGrid(8, 8, 8)
SMALL_GRID = PatchGrid(4, 2, 6)


def _tokens(rng, grid, C, B=2, dtype=np.float64):
    return TokenBatch(T.Tensor(rng.normal(size=(B, grid.n_tokens, C)).astype(dtype)), grid)


def identity_pool(kind, C, grid, dtype=np.float64):
    m = build_perceiver(PerceiverSpec(kind=kind, k=2, out_channels=C), C, grid, dtype=dtype)
    m.proj.weight.data = np.eye(C, dtype=dtype)
    m.proj.bias.data = np.zeros(C, dtype=dtype)
    return m


def averaging_conv(C, grid, k=2, dtype=np.float64):
    m = build_perceiver(PerceiverSpec(kind="conv3d", k=k, out_channels=C), C, grid, dtype=dtype)
    w = np.zeros((C, C, k, k, k), dtype=dtype)
    for c in range(C):
        w[c, c] = 1.0 / k ** 3
    m.weight.data = w
    m.bias.data = np.zeros(C, dtype=dtype)
    return m


def test_round_trip_3d():
    x = _tokens(np.random.default_rng(0), SMALL_GRID, 3)
    back = to_sequence(to_3d(x))
    assert back.grid == SMALL_GRID
    assert np.array_equal(back.values.data, x.values.data)


def test_identity_conv_k1_round_trip():
    C = 3
    x = _tokens(np.random.default_rng(0), SMALL_GRID, C)
    m = build_perceiver(PerceiverSpec(kind="conv3d", k=1, out_channels=C), C, SMALL_GRID, dtype=np.float64)
    m.weight.data = np.eye(C).reshape(C, C, 1, 1, 1)
    m.bias.data = np.zeros(C)
    assert np.array_equal(m(x).values.data, x.values.data)


def test_token_zero_is_grid_origin():
    v = np.zeros((1, SMALL_GRID.n_tokens, 1))
    v[0, 0, 0] = 1.0
    x5 = to_3d(TokenBatch(T.Tensor(v), SMALL_GRID)).data
    assert x5[0, 0, 0, 0, 0] == 1.0 and x5.sum() == 1.0


def test_toy_token_budget():
    assert check_grid(TOY_GRID, 2).n_tokens == 64
    with pytest.raises(ConfigError):
        check_grid(TOY_GRID, 3)


def test_avg_pool_of_0_to_7():
    grid = PatchGrid(2, 2, 2)
    v = np.arange(8, dtype=np.float64).reshape(1, 8, 1)
    out = identity_pool("avg_pool", 1, grid)(TokenBatch(T.Tensor(v), grid))
    assert out.values.data.item() == 3.5


@pytest.mark.parametrize("seed", range(5))
def test_conv_with_average_kernel_equals_avg_pool(seed):
    C = 5
    x = _tokens(np.random.default_rng(seed), SMALL_GRID, C)
    a = averaging_conv(C, SMALL_GRID)(x).values.data
    b = identity_pool("avg_pool", C, SMALL_GRID)(x).values.data
    assert np.max(np.abs(a - b)) <= 1e-5


def test_param_counts_toy():
    assert param_count(PerceiverSpec("conv3d", 2, 64), 64) == 32_832
    assert param_count(PerceiverSpec("avg_pool", 2, 64), 64) == 4_160
    assert param_count(PerceiverSpec("max_pool", 2, 64), 64) == 4_160


@pytest.mark.parametrize("kind", KINDS)
def test_param_count_matches_module(kind):
    spec = PerceiverSpec(kind=kind, k=2, out_channels=32, layers=2, heads=4, mixer_expansion=2)
    m = build_perceiver(spec, 16, SMALL_GRID)
    assert m.num_parameters() == param_count(spec, 16, SMALL_GRID)


@pytest.mark.parametrize("kind", KINDS)
def test_output_shape_and_prefix_length(kind):
    spec = PerceiverSpec(kind=kind, k=2, out_channels=8, layers=1, heads=2, mixer_expansion=2)
    m = build_perceiver(spec, 6, SMALL_GRID)
    out = perceive(TokenBatch(np.zeros((3, SMALL_GRID.n_tokens, 6), np.float32), SMALL_GRID), spec, m)
    assert out.values.shape == (3, SMALL_GRID.n_tokens // 8, 8)
    assert out.grid == check_grid(SMALL_GRID, 2)


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        PerceiverSpec(kind="resampler")
    assert PerceiverSpec(kind="MaxPool").kind == "max_pool"


@pytest.mark.parametrize("kind", KINDS)
def test_perceiver_gradcheck(kind):
    worst = max(perceiver_error(kind, s) for s in range(20))
    assert worst <= 1e-4, f"{kind}: max relative error {worst:.3e}"


# ---------------------------------------------------------------- locality

def _local_view(kind, C, grid):
    spec = PerceiverSpec(kind=kind, k=2, out_channels=C, layers=1, heads=1, mixer_expansion=2)
    m = build_perceiver(spec, C, grid, dtype=np.float64)
    if kind in ("avg_pool", "max_pool"):
        return lambda x: m.pool(x).data
    return lambda x: m(x).values.data


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["conv3d", "avg_pool", "max_pool", "local_qformer"]), st.integers(0, SMALL_GRID.n_tokens - 1),
       st.integers(0, 10_000))
def test_locality(kind, token, seed):
    C = 4
    f = _local_view(kind, C, SMALL_GRID)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(1, SMALL_GRID.n_tokens, C))
    w = v.copy()
    w[0, token] += 10.0 * rng.choice([-1.0, 1.0], size=C)
    delta = np.abs(f(TokenBatch(T.Tensor(w), SMALL_GRID)) - f(TokenBatch(T.Tensor(v), SMALL_GRID))).sum(axis=-1)[0]
    # block that owns the token
    ids = T.Tensor(np.arange(SMALL_GRID.n_tokens).reshape(1, -1, 1))
    owner = to_blocks(ids, SMALL_GRID, 2).data[0, :, :, 0]
    m = int(np.argwhere(owner == token)[0, 0])
    assert np.all(delta[np.arange(len(delta)) != m] == 0.0)
    if kind != "max_pool":
        assert delta[m] > 0.0
