"""Anisotropic 3D ViT tokenizer and masked-autoencoder pretraining."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    D: int

    @property
    def n_tokens(self) -> int:
        return self.H * self.W * self.D

    @property
    def dims(self):
        return (self.H, self.W, self.D)


@dataclass(frozen=True)
class ViT3DConfig:
    input_dims: tuple = (64, 64, 32)
    patch_size: tuple = (8, 8, 4)
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.75

    def __post_init__(self):
        for n, p in zip(self.input_dims, self.patch_size):
            if p < 1 or n % p:
                raise ConfigError(f"patch size {tuple(self.patch_size)} does not divide input dims {tuple(self.input_dims)}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(*(n // p for n, p in zip(self.input_dims, self.patch_size)))

    @property
    def patch_voxels(self) -> int:
        px, py, pz = self.patch_size
        return px * py * pz

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


PAPER_VIT = ViT3DConfig(input_dims=(224, 224, 112), patch_size=(16, 16, 8), embed_dim=1536,
                        depth=12, heads=12, decoder_dim=512, decoder_depth=8, decoder_heads=16)


@dataclass
class TokenBatch:
    """(B, N, C) token values with the 3D grid they were flattened from."""

    values: object  # Tensor or ndarray
    grid: PatchGrid

    def __post_init__(self):
        if self.values.shape[1] != self.grid.n_tokens:
            raise ConfigError(f"token count {self.values.shape[1]} != grid {self.grid.dims} ({self.grid.n_tokens})")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class MaskPlan:
    keep_indices: np.ndarray
    masked_indices: np.ndarray
    restore: np.ndarray = field(repr=False)

    @property
    def n_keep(self):
        return len(self.keep_indices)


# --------------------------------------------------------------------------
# patchify / masking / positions
# --------------------------------------------------------------------------


def patchify(grids, patch_size) -> TokenBatch:
    """(B, tx, ty, tz) grids -> (B, N, px*py*pz) raw patch tokens.

    Token n sits at grid cell (gh, gw, gd) with n = gh*W*D + gw*D + gd; voxels
    inside a patch are flattened x-fastest.
    """
    g = np.asarray(grids)
    if g.ndim == 3:
        g = g[None]
    B, tx, ty, tz = g.shape
    px, py, pz = patch_size
    if tx % px or ty % py or tz % pz:
        raise ConfigError(f"patch size {tuple(patch_size)} does not divide grid dims {(tx, ty, tz)}")
    H, W, D = tx // px, ty // py, tz // pz
    v = g.reshape(B, H, px, W, py, D, pz).transpose(0, 1, 3, 5, 6, 4, 2)
    return TokenBatch(np.ascontiguousarray(v.reshape(B, H * W * D, px * py * pz)), PatchGrid(H, W, D))


def unpatchify(tokens: TokenBatch, patch_size) -> np.ndarray:
    t = np.asarray(tokens.values.data if isinstance(tokens.values, Tensor) else tokens.values)
    px, py, pz = patch_size
    B, N, P = t.shape
    if P != px * py * pz:
        raise ConfigError(f"token length {P} != patch voxel count {px * py * pz}")
    H, W, D = tokens.grid.dims
    v = t.reshape(B, H, W, D, pz, py, px).transpose(0, 1, 6, 2, 5, 3, 4)
    return np.ascontiguousarray(v.reshape(B, H * px, W * py, D * pz))


def n_keep_for(N, ratio) -> int:
    return int(min(max(math.floor(N * (1.0 - ratio) + 0.5), 1), N - 1))


def random_mask(N, ratio, rng) -> MaskPlan:
    """Uniform random keep/mask split with ``round(N * (1 - ratio))`` kept (half-up)."""
    if N < 2:
        raise ConfigError("random_mask needs N >= 2")
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    k = n_keep_for(N, ratio)
    perm = rng.permutation(N)
    keep = np.sort(perm[:k])
    masked = np.sort(perm[k:])
    return MaskPlan(keep, masked, np.argsort(np.concatenate([keep, masked])))


def _sincos_1d(pos, dim):
    """Interleaved [sin(p w0), cos(p w0), sin(p w1), ...] for each position."""
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    ang = np.outer(pos.astype(np.float64), omega)
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sincos_pos_embed_3d(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed (N, dim) table; each grid axis gets 2*floor(dim/6) channels and
    any leftover channels (dim mod 6) are zero."""
    if dim < 6:
        raise ConfigError(f"positional embedding needs dim >= 6, got {dim}")
    per_axis = 2 * (dim // 6)
    gh, gw, gd = np.meshgrid(np.arange(grid.H), np.arange(grid.W), np.arange(grid.D), indexing="ij")
    out = np.zeros((grid.n_tokens, dim))
    for a, coord in enumerate((gh.ravel(), gw.ravel(), gd.ravel())):
        out[:, a * per_axis:(a + 1) * per_axis] = _sincos_1d(coord, per_axis)
    return out


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class MaskedAutoencoder3D(nn.Module):
    def __init__(self, cfg: ViT3DConfig, seed=0, dtype=np.float32):
        rng = T.make_rng(seed, 101)
        self.cfg = cfg
        grid = cfg.grid
        C, Cd, P = cfg.embed_dim, cfg.decoder_dim, cfg.patch_voxels
        self.patch_embed = nn.Linear(P, C, rng, dtype=dtype)
        self.blocks = [nn.Block(C, cfg.heads, rng, cfg.mlp_ratio, dtype) for _ in range(cfg.depth)]
        self.norm = nn.LayerNorm(C, dtype)
        self.decoder_embed = nn.Linear(C, Cd, rng, dtype=dtype)
        self.mask_token = Tensor(rng.normal(0, 0.02, size=(1, 1, Cd)).astype(dtype), requires_grad=True)
        self.decoder_blocks = [nn.Block(Cd, cfg.decoder_heads, rng, cfg.mlp_ratio, dtype)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = nn.LayerNorm(Cd, dtype)
        self.decoder_pred = nn.Linear(Cd, P, rng, dtype=dtype)
        # fixed tables, not parameters
        self._pos = sincos_pos_embed_3d(grid, C).astype(dtype)
        self._dec_pos = sincos_pos_embed_3d(grid, Cd).astype(dtype)
        self.dtype = dtype

    def encoder_params(self):
        names = ("patch_embed", "blocks", "norm")
        return [p for n, p in self.named_parameters() if n.split(".")[0] in names]

    def _embed(self, tokens, keep=None):
        x = self.patch_embed(Tensor(tokens.astype(self.dtype))) + self._pos
        if keep is not None:
            x = T.gather(x, keep[:, :, None], axis=1, unique=True)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode(self, grids) -> TokenBatch:
        tb = patchify(grids, self.cfg.patch_size)
        return TokenBatch(self._embed(tb.values), tb.grid)

    def decode(self, latent, plans):
        """Visible latents (B, K, C) -> predicted patches (B, N, P)."""
        B, K, _ = latent.shape
        N = self.cfg.grid.n_tokens
        x = self.decoder_embed(latent)
        masks = self.mask_token * np.ones((B, N - K, 1), dtype=self.dtype)
        x = T.concat([x, masks], axis=1)
        restore = np.stack([p.restore for p in plans])
        x = T.gather(x, restore[:, :, None], axis=1, unique=True)
        x = x + self._dec_pos
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))

    def forward(self, grids, plans):
        tb = patchify(grids, self.cfg.patch_size)
        keep = np.stack([p.keep_indices for p in plans])
        latent = self._embed(tb.values, keep)
        pred = self.decode(latent, plans)
        return pred, masked_mse(pred, tb.values, plans)


def masked_mse(pred, target_tokens, plans):
    """MSE between predicted and target patches at masked positions only."""
    masked = np.stack([p.masked_indices for p in plans])[:, :, None]
    target = np.take_along_axis(np.asarray(target_tokens), masked, axis=1)
    return T.mse_loss(T.gather(pred, masked, axis=1, unique=True), target.astype(pred.dtype))


def make_plans(batch_size, cfg: ViT3DConfig, rng):
    return [random_mask(cfg.grid.n_tokens, cfg.mask_ratio, rng) for _ in range(batch_size)]


def mae_forward(model: MaskedAutoencoder3D, grids, rng):
    """Returns (reconstructed patch tokens, masked MSE, per-sample MaskPlans)."""
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    if tuple(grids.shape[1:]) != tuple(model.cfg.input_dims):
        raise ConfigError(f"grid dims {grids.shape[1:]} != model input dims {tuple(model.cfg.input_dims)}")
    plans = make_plans(len(grids), model.cfg, rng)
    pred, loss = model(grids, plans)
    return pred, loss, plans


def encode(model: MaskedAutoencoder3D, grids) -> TokenBatch:
    """All N tokens through the encoder, no masking, no graph."""
    with T.no_grad():
        return model.encode(np.asarray(grids))


def evaluate_mae(model, grids, seed=0, batch_size=8):
    """Mean masked MSE over ``grids`` with masks fixed by ``seed``."""
    rng = T.make_rng(seed, 7)
    total, n = 0.0, 0
    with T.no_grad():
        for i in range(0, len(grids), batch_size):
            batch = grids[i:i + batch_size]
            _, loss, _ = mae_forward(model, batch, rng)
            total += float(loss.data) * len(batch)
            n += len(batch)
    return total / n


def pretrain_loop(model, grids, steps, lr=1.5e-4, batch_size=8, decay=0.95, seed=0, on_step=None):
    """MAE pretraining; returns per-step records ``{step, loss, lr}``.

    Batches walk a seeded shuffle of ``grids``; the learning rate decays by
    ``decay`` at each pass over the data.
    """
    n = len(grids)
    if n == 0:
        raise ValueError("pretrain_loop: empty dataset")
    rng = T.make_rng(seed, 11)
    params = model.parameters()
    opt = Adam(params, lr=lr, decay=decay)
    model.train()
    order = rng.permutation(n)
    cursor = 0
    history = []
    for step in range(steps):
        if cursor + batch_size > n and cursor > 0:
            opt.end_epoch()
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        opt.zero_grad()
        _, loss, _ = mae_forward(model, grids[idx], rng)
        T.backward(loss, params)
        opt.step()
        rec = {"step": step, "loss": float(loss.data), "lr": opt.lr}
        if not np.isfinite(rec["loss"]):
            raise FloatingPointError(f"non-finite MAE loss at step {step}")
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return history
