"""Token perceivers: (B, N, C) vision tokens -> (B, N/k^3, C') LM prefix tokens.

Six interchangeable aggregators share one shape contract. The grid axes map
H <- x, W <- y, D <- z, matching :func:`volvlm.mae.patchify`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .mae import ConfigError, PatchGrid, TokenBatch
from .tensor import Tensor

KINDS = ("conv3d", "global_qformer", "local_qformer", "mlp_mixer", "avg_pool", "max_pool")

_ALIASES = {
    "conv3d": "conv3d", "conv": "conv3d", "convolution": "conv3d",
    "globalqformer": "global_qformer", "global_qformer": "global_qformer",
    "localqformer": "local_qformer", "local_qformer": "local_qformer",
    "mlpmixer": "mlp_mixer", "mlp_mixer": "mlp_mixer", "mixer": "mlp_mixer",
    "avgpool": "avg_pool", "avg_pool": "avg_pool", "avgpooling": "avg_pool",
    "maxpool": "max_pool", "max_pool": "max_pool", "maxpooling": "max_pool",
}


@dataclass(frozen=True)
class PerceiverSpec:
    kind: str = "conv3d"
    k: int = 2
    out_channels: int = 64
    layers: int = 2
    heads: int = 4
    mixer_expansion: int = 4

    def __post_init__(self):
        key = self.kind.lower().replace("-", "_")
        if key not in _ALIASES:
            raise ConfigError(f"unknown perceiver kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", _ALIASES[key])
        if self.k < 1:
            raise ConfigError(f"perceiver k must be >= 1, got {self.k}")
        if self.out_channels < 1:
            raise ConfigError(f"perceiver out_channels must be >= 1, got {self.out_channels}")
        if self.kind.endswith("qformer") and self.out_channels % self.heads:
            raise ConfigError(f"out_channels {self.out_channels} not divisible by heads {self.heads}")

    def to_dict(self):
        return asdict(self)


def check_grid(grid: PatchGrid, k: int) -> PatchGrid:
    """Reduced grid (H/k, W/k, D/k); raises if k does not divide the grid."""
    if any(n % k for n in grid.dims):
        raise ConfigError(f"perceiver k={k} does not divide token grid {grid.dims}")
    return PatchGrid(*(n // k for n in grid.dims))


def to_3d(x: TokenBatch):
    """(B, N, C) -> (B, C, H, W, D)."""
    v = x.values
    B, N, C = v.shape
    H, W, D = x.grid.dims
    if N != H * W * D:
        raise ConfigError(f"token count {N} does not match grid {x.grid.dims}")
    return T.transpose(T.reshape(v, (B, H, W, D, C)), (0, 4, 1, 2, 3))


def to_sequence(x5) -> TokenBatch:
    """(B, C', H', W', D') -> TokenBatch (B, H'W'D', C')."""
    B, C, H, W, D = x5.shape
    seq = T.reshape(T.transpose(x5, (0, 2, 3, 4, 1)), (B, H * W * D, C))
    return TokenBatch(seq, PatchGrid(H, W, D))


def to_blocks(v, grid: PatchGrid, k: int):
    """(B, N, C) -> (B, M, k^3, C); block m follows the reduced grid order."""
    B, N, C = v.shape
    H, W, D = grid.dims
    x = T.reshape(v, (B, H // k, k, W // k, k, D // k, k, C))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return T.reshape(x, (B, (N // k ** 3), k ** 3, C))


# --------------------------------------------------------------------------
# the six aggregators
# --------------------------------------------------------------------------


class Conv3DPerceiver(nn.Module):
    """To3D -> Conv3D (kernel k, stride k, C' outputs, bias) -> ToSequence."""

    def __init__(self, C, spec, grid, rng, dtype=np.float32):
        k, Co = spec.k, spec.out_channels
        fan_in, fan_out = C * k ** 3, Co
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(Co, C, k, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(Co, dtype=dtype), requires_grad=True)
        self.k = k

    def forward(self, x: TokenBatch) -> TokenBatch:
        return to_sequence(T.conv3d(to_3d(x), self.weight, self.bias, stride=self.k))


class PoolPerceiver(nn.Module):
    """Non-overlapping k^3 block mean or max, then a shared C -> C' projection."""

    def __init__(self, C, spec, grid, rng, dtype=np.float32):
        self.proj = nn.Linear(C, spec.out_channels, rng, dtype=dtype)
        self.k = spec.k
        self.mode = "max" if spec.kind == "max_pool" else "avg"

    def pool(self, x: TokenBatch):
        blocks = to_blocks(x.values, x.grid, self.k)
        return T.amax(blocks, axis=2) if self.mode == "max" else T.mean(blocks, axis=2)

    def forward(self, x: TokenBatch) -> TokenBatch:
        out_grid = check_grid(x.grid, self.k)
        return TokenBatch(self.proj(self.pool(x)), out_grid)


class MixerPerceiver(nn.Module):
    """One mixer block used for merging.

    Token mixing is a dense N -> N/k^3 map shared across channels; channel
    mixing is an MLP C -> e*C -> C' per token. Both are preceded by a layer norm.
    """

    def __init__(self, C, spec, grid, rng, dtype=np.float32):
        N = grid.n_tokens
        M = N // spec.k ** 3
        self.norm1 = nn.LayerNorm(C, dtype)
        self.token_mix = nn.Linear(N, M, rng, dtype=dtype)
        self.norm2 = nn.LayerNorm(C, dtype)
        self.channel_mlp = nn.MLP(C, spec.mixer_expansion * C, rng, dtype, d_out=spec.out_channels)
        self.k = spec.k

    def forward(self, x: TokenBatch) -> TokenBatch:
        out_grid = check_grid(x.grid, self.k)
        h = T.swapaxes(self.norm1(x.values), 1, 2)          # (B, C, N)
        h = T.swapaxes(self.token_mix(h), 1, 2)             # (B, M, C)
        return TokenBatch(self.channel_mlp(self.norm2(h)), out_grid)


class GlobalQformer(nn.Module):
    """M = N/k^3 learned queries cross-attend to all N tokens."""

    def __init__(self, C, spec, grid, rng, dtype=np.float32):
        Co = spec.out_channels
        M = grid.n_tokens // spec.k ** 3
        self.kv_proj = nn.Linear(C, Co, rng, dtype=dtype)
        self.queries = Tensor(rng.normal(0, 1.0, size=(1, M, Co)).astype(dtype), requires_grad=True)
        self.layers = [nn.CrossBlock(Co, spec.heads, rng, dtype=dtype) for _ in range(spec.layers)]
        self.k = spec.k

    def forward(self, x: TokenBatch) -> TokenBatch:
        out_grid = check_grid(x.grid, self.k)
        B = x.values.shape[0]
        ctx = self.kv_proj(x.values)
        q = self.queries * np.ones((B, 1, 1), dtype=self.queries.dtype)
        for layer in self.layers:
            q = layer(q, ctx)
        return TokenBatch(q, out_grid)


class LocalQformer(nn.Module):
    """One learned query per k^3 block, attending only inside its block."""

    def __init__(self, C, spec, grid, rng, dtype=np.float32):
        Co = spec.out_channels
        M = grid.n_tokens // spec.k ** 3
        self.kv_proj = nn.Linear(C, Co, rng, dtype=dtype)
        self.queries = Tensor(rng.normal(0, 1.0, size=(1, M, Co)).astype(dtype), requires_grad=True)
        self.layers = [nn.CrossBlock(Co, spec.heads, rng, dtype=dtype) for _ in range(spec.layers)]
        self.k = spec.k

    def forward(self, x: TokenBatch) -> TokenBatch:
        out_grid = check_grid(x.grid, self.k)
        B = x.values.shape[0]
        M, kk = out_grid.n_tokens, self.k ** 3
        ctx = to_blocks(self.kv_proj(x.values), x.grid, self.k)          # (B, M, k^3, C')
        Co = ctx.shape[-1]
        ctx = T.reshape(ctx, (B * M, kk, Co))
        q = self.queries * np.ones((B, 1, 1), dtype=self.queries.dtype)
        q = T.reshape(q, (B * M, 1, Co))
        for layer in self.layers:
            q = layer(q, ctx)
        return TokenBatch(T.reshape(q, (B, M, Co)), out_grid)


_CLASSES = {
    "conv3d": Conv3DPerceiver,
    "avg_pool": PoolPerceiver,
    "max_pool": PoolPerceiver,
    "mlp_mixer": MixerPerceiver,
    "global_qformer": GlobalQformer,
    "local_qformer": LocalQformer,
}


def build_perceiver(spec: PerceiverSpec, in_channels: int, grid: PatchGrid, seed=0, dtype=np.float32):
    check_grid(grid, spec.k)
    rng = T.make_rng(seed, 202, KINDS.index(spec.kind))
    return _CLASSES[spec.kind](in_channels, spec, grid, rng, dtype)


def perceive(x: TokenBatch, spec: PerceiverSpec, weights) -> TokenBatch:
    """Run ``weights`` (a module from :func:`build_perceiver`) on ``x``."""
    check_grid(x.grid, spec.k)
    if not isinstance(x.values, Tensor):
        x = TokenBatch(Tensor(x.values), x.grid)
    return weights(x)


def param_count(spec: PerceiverSpec, C: int, grid: PatchGrid | None = None) -> int:
    """Trainable parameters of one perceiver, by closed form.

    Mixer and Q-former counts depend on the token count, so they need ``grid``.
    """
    k, Co = spec.k, spec.out_channels
    if spec.kind == "conv3d":
        return Co * C * k ** 3 + Co
    if spec.kind in ("avg_pool", "max_pool"):
        return C * Co + Co
    if grid is None:
        raise ConfigError(f"param_count for {spec.kind} needs the token grid")
    N = grid.n_tokens
    M = N // k ** 3
    if spec.kind == "mlp_mixer":
        e = spec.mixer_expansion
        return 2 * C + (N * M + M) + 2 * C + (C * e * C + e * C) + (e * C * Co + Co)
    per_layer = 12 * Co * Co + 15 * Co
    return C * Co + Co + M * Co + spec.layers * per_layer
