"""AdamW with decoupled weight decay.

For each parameter p with gradient g at step t (starting from 1)::

    p  <- p - lr * wd * p
    m  <- b1 * m + (1 - b1) * g
    v  <- b2 * v + (1 - b2) * g^2
    p  <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

Parameters whose gradient is None are left untouched (no decay either).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


@torch.no_grad()
def adamw_step(named_params, state: OptimState) -> OptimState:
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {tuple(g.shape)} != {tuple(p.shape)}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        p.mul_(1 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state
