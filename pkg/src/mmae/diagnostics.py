"""Gradient checks for the individual ops and the full pre-training loss."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import flowmix
from .model import MMAE, ModelConfig, sample_rank_pairs
from .nn.gradcheck import GradCheckReport, grad_check
from .nn.ops import biased_attention, cosine_similarity


def pretrain_loss_closure(cfg: ModelConfig | None = None, batch: int = 4, seed: int = 0):
    """(f, params, model) for L_pre on a fixed random batch, in float64.

    Pairs, masks and ranking pairs are fixed, and the stop-gradient targets
    (teacher output, ranking targets) are frozen at the initial parameters,
    so ``f`` is a deterministic function whose true gradient is what
    autograd reports.
    """
    cfg = cfg or ModelConfig.profile("tiny")
    torch.manual_seed(seed)
    model = MMAE(cfg).double()
    # perturb the teacher so the alignment term is not degenerate
    with torch.no_grad():
        for p in model.teacher.parameters():
            p.add_(0.05 * torch.randn_like(p))
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 1600, generator=g, dtype=torch.float64)
    s_time = torch.rand(batch, 5, generator=g, dtype=torch.float64)
    s_len = torch.rand(batch, 5, generator=g, dtype=torch.float64) * 500
    pairs = np.arange(batch)
    pairs[: batch - batch % 2] = np.arange(batch - batch % 2).reshape(-1, 2)[:, ::-1].reshape(-1)
    rng = np.random.default_rng(seed)
    masks = np.stack([flowmix.build_mask(None, 0.5, 0.0, rng, n_x=cfg.n_x).m for _ in range(batch)])
    for a, b in enumerate(pairs):
        masks[b] = masks[min(a, b)]
    rank_index = sample_rank_pairs(cfg.n_x, cfg.rank_pairs, batch, g)
    model.train()
    with torch.no_grad():
        base = model(x, s_time, s_len, pairs, masks, rank_index)
    frozen = {"rank_rec": base.per_patch_rec, "h_teacher": base.h_teacher}
    if cfg.recon_target != "raw_bytes":
        frozen["recon_target"] = model.embed.embed_patches(x).detach()

    def f():
        return model(x, s_time, s_len, pairs, masks, rank_index, frozen).l_pre

    params = [p for _, p in model.trainable() if not _.startswith("matcher.")]
    return f, params, model


def full_model_grad_check(seed: int = 0, h: float = 1e-4, stencil: int = 4,
                          floor: float = 1e-6) -> GradCheckReport:
    """Every coordinate of every non-matcher trainable parameter.

    Some gradients are exactly zero (biases that cancel inside a softmax or
    a pairwise difference); the finite difference there is pure float64
    round-off near 1e-12, hence the larger denominator floor.
    """
    f, params, _ = pretrain_loss_closure(seed=seed)
    return grad_check(f, params, h=h, stencil=stencil, floor=floor)


def teacher_grads_are_zero(seed: int = 0) -> bool:
    f, _, model = pretrain_loss_closure(seed=seed)
    for p in model.teacher.parameters():
        p.requires_grad_(True)
    loss = f()
    grads = torch.autograd.grad(loss, list(model.teacher.parameters()), allow_unused=True)
    return all(g is None or torch.count_nonzero(g) == 0 for g in grads)


def op_cases(seed: int):
    """Named scalar-valued closures over small random float64 leaves, one per op."""
    g = torch.Generator().manual_seed(seed)

    def leaf(*shape, scale=1.0):
        return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_()

    a, b = leaf(3, 4), leaf(4, 2)
    x, w, bias = leaf(2, 5), leaf(3, 5), leaf(3)
    ln_w, ln_b = leaf(5), leaf(5)
    conv_x, conv_w = leaf(2, 1, 9), leaf(3, 1, 3)
    q, k, v, ab = leaf(1, 2, 4, 3), leaf(1, 2, 4, 3), leaf(1, 2, 4, 3), leaf(4, 4)
    logits, target = leaf(4, 3), torch.tensor([0, 2, 1, 1])
    probs_x = leaf(6)
    y01 = torch.rand(6, generator=g, dtype=torch.float64)
    bn_x = leaf(4, 3)
    # keep away from the clamp boundary and the ReLU kink
    cx = (torch.linspace(-8, 8, 7, dtype=torch.float64) + 0.37).requires_grad_()
    pool_x = leaf(2, 3, 8)
    idx, idx_dst = torch.tensor([2, 0]), torch.tensor([1, 2])
    w_t = torch.randn(3, 5, generator=g, dtype=torch.float64)
    w_43 = torch.randn(4, 3, generator=g, dtype=torch.float64)
    return {
        "matmul": (lambda: (a @ b).pow(2).sum(), [a, b]),
        "add_mul_broadcast": (lambda: ((a + bias[:1]) * a[0]).sum(), [a, bias]),
        "linear": (lambda: F.linear(x, w, bias).pow(2).sum(), [x, w, bias]),
        "layer_norm": (lambda: (F.layer_norm(x, (5,), ln_w, ln_b) * w[0]).sum(), [x, ln_w, ln_b]),
        "batch_norm_1d": (lambda: (F.batch_norm(bn_x, None, None, training=True) * w_43).pow(2).sum(), [bn_x]),
        "conv1d": (lambda: F.conv1d(conv_x, conv_w, stride=1).pow(2).sum(), [conv_x, conv_w]),
        "adaptive_max_pool1d": (lambda: (F.adaptive_max_pool1d(pool_x, 3) ** 2).sum(), [pool_x]),
        "attention_bias": (lambda: (biased_attention(q, k, v, ab) ** 2).sum(), [q, k, v, ab]),
        "gelu": (lambda: F.gelu(x).pow(2).sum(), [x]),
        "relu": (lambda: (F.relu(cx) * cx).sum(), [cx]),
        "sigmoid": (lambda: torch.sigmoid(x).pow(2).sum(), [x]),
        "softplus": (lambda: F.softplus(x).pow(2).sum(), [x]),
        "softmax": (lambda: (torch.softmax(logits, -1) * w_43).sum(), [logits]),
        "cosine_similarity": (lambda: cosine_similarity(x, w[:2]).sum(), [x]),
        "mse": (lambda: F.mse_loss(x, w[:2]), [x]),
        "bce": (lambda: F.binary_cross_entropy(torch.sigmoid(probs_x), y01), [probs_x]),
        "cross_entropy": (lambda: F.cross_entropy(logits, target), [logits]),
        "clamp": (lambda: (torch.clamp(cx, -5, 5) ** 2).sum(), [cx]),
        "concatenate": (lambda: torch.cat([a, a * 2], 0).pow(2).sum(), [a]),
        "gather_scatter": (lambda: (a.index_copy(0, idx_dst, a.index_select(0, idx) * 3) ** 2).sum(), [a]),
    }


def op_grad_suite(seeds=range(50), h: float = 1e-5) -> dict:
    """Worst relative error per op across seeds."""
    worst: dict = {}
    for seed in seeds:
        for name, (f, params) in op_cases(seed).items():
            rep = grad_check(f, params, h=h)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
    return worst
