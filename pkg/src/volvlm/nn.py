"""Layers built on :mod:`volvlm.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container. Tensor attributes are parameters; Module and list
    attributes are walked recursively in definition order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier_uniform(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out, dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        return T.linear(x, self.weight, getattr(self, "bias", None))


class LoRALinear(Module):
    """Frozen base map plus a low-rank update ``(alpha / r) * B(A(dropout(x)))``.

    A is (d_in, r) gaussian with sigma 0.01; B is (r, d_out) zeros, so the
    adapted map equals the base map until B moves.
    """

    def __init__(self, base: Linear, r, alpha, dropout, rng):
        self.base = base
        dtype = base.weight.dtype
        self.lora_A = Tensor(rng.normal(0.0, 0.01, size=(base.d_in, r)).astype(dtype), requires_grad=True)
        self.lora_B = Tensor(np.zeros((r, base.d_out), dtype=dtype), requires_grad=True)
        self.scaling = alpha / r
        self.p = dropout
        self._rng = rng
        self.d_in, self.d_out = base.d_in, base.d_out

    def forward(self, x):
        y = self.base(x)
        h = T.dropout(x, self.p, self._rng, self.training)
        return y + T.matmul(T.matmul(h, self.lora_A), self.lora_B) * self.scaling

    def merged_weight(self):
        return self.base.weight.data + self.scaling * (self.lora_A.data @ self.lora_B.data)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def split_heads(x, heads):
    B, N, C = x.shape
    return x.reshape(B, N, heads, C // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, H, N, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * d)


def attention(q, k, v, heads, mask=None):
    """Scaled dot-product attention on (B, N, C) inputs.

    ``mask`` is an additive array broadcastable to (B, heads, Nq, Nk).
    """
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = scores + mask
    return merge_heads(T.matmul(T.softmax(scores, -1), vh))


class Attention(Module):
    """Multi-head attention with separate q/k/v/out maps (q and v are LoRA targets)."""

    def __init__(self, dim, heads, rng, dtype=np.float32, kv_dim=None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(kv_dim, dim, rng, dtype=dtype)
        self.v = Linear(kv_dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.heads = heads

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        out = attention(self.q(x), self.k(context), self.v(context), self.heads, mask)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float32, d_out=None):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d_out or dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, rng, mlp_ratio=4, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, dtype)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


class CrossBlock(Module):
    """Queries attend to a context sequence, then an MLP (one Q-former layer)."""

    def __init__(self, dim, heads, rng, mlp_ratio=4, dtype=np.float32):
        self.norm_q = LayerNorm(dim, dtype)
        self.norm_kv = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, dtype)

    def forward(self, q, context):
        q = q + self.attn(self.norm_q(q), context=self.norm_kv(context))
        return q + self.mlp(self.norm2(q))
