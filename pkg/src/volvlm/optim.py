"""Adam with bias correction and per-epoch exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    weight_decay: float = 0.0  # decoupled (AdamW style)
    step: int = 0
    epoch: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def current_lr(self) -> float:
        return self.lr * self.decay ** self.epoch


def adam_step(params, grads, state: AdamState) -> None:
    """One in-place Adam update. ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    lr = state.current_lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.data.shape:
            raise ValueError(f"adam: moment shape {m.shape} vs param {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + lr * state.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, decay=1.0, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, decay=decay,
                               weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def end_epoch(self):
        self.state.epoch += 1

    @property
    def lr(self):
        return self.state.current_lr
