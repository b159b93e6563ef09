"""Differentiable building blocks on top of torch autograd.

Attention accepts an additive bias that is added to the scaled scores
before the softmax; a (N, N) bias is shared across batch and heads, a
(B, N, N) bias across heads only.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeMismatch(ValueError):
    pass


def check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"shapes differ: {sorted(shapes)}")


def attention_weights(q, k, bias=None):
    """softmax(q k^T / sqrt(d) + bias) for q, k of shape (B, H, N, d)."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        if bias.dim() == 3:
            bias = bias.unsqueeze(1)
        scores = scores + bias
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    return torch.softmax(scores, dim=-1)


def biased_attention(q, k, v, bias=None):
    if bias is not None and bias.dim() == 3:
        bias = bias.unsqueeze(1)
    if bias is not None:
        bias = bias.to(q.dtype)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=bias)


def cosine_similarity(a, b, dim=-1, eps=1e-8):
    """Cosine along ``dim``; a zero vector yields similarity 0."""
    num = (a * b).sum(dim)
    den = a.norm(dim=dim).clamp_min(eps) * b.norm(dim=dim).clamp_min(eps)
    return num / den


def gather_rows(x, index):
    return x.index_select(0, index)


def scatter_rows(x, index, src):
    return x.index_copy(0, index, src)


def op_set() -> dict:
    """Catalog of the differentiable ops the model relies on."""
    return {
        "matmul": torch.matmul,
        "add": torch.add,
        "mul": torch.mul,
        "linear": F.linear,
        "layer_norm": F.layer_norm,
        "batch_norm_1d": F.batch_norm,
        "conv1d": F.conv1d,
        "adaptive_max_pool1d": F.adaptive_max_pool1d,
        "attention": biased_attention,
        "gelu": F.gelu,
        "relu": F.relu,
        "sigmoid": torch.sigmoid,
        "softplus": F.softplus,
        "softmax": torch.softmax,
        "cosine_similarity": cosine_similarity,
        "mse": F.mse_loss,
        "binary_cross_entropy": F.binary_cross_entropy,
        "binary_cross_entropy_with_logits": F.binary_cross_entropy_with_logits,
        "cross_entropy": F.cross_entropy,
        "clamp": torch.clamp,
        "detach": torch.Tensor.detach,
        "concatenate": torch.cat,
        "gather": gather_rows,
        "scatter": scatter_rows,
    }


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def split(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).view(B, N, 3, self.heads, D // self.heads)
        return qkv.permute(2, 0, 3, 1, 4).unbind(0)

    def forward(self, x, bias=None, return_weights=False):
        B, N, D = x.shape
        q, k, v = self.split(x)
        if return_weights:
            w = attention_weights(q, k, bias)
            return self.proj((w @ v).transpose(1, 2).reshape(B, N, D)), w
        return self.proj(biased_attention(q, k, v, bias).transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, bias=None):
        x = x + self.attn(self.norm1(x), bias)
        return x + self.mlp(self.norm2(x))


class Stack(nn.Module):
    """``depth`` blocks plus a final norm; depth 0 is the identity."""

    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim) if depth else nn.Identity()

    def forward(self, x, bias=None):
        for blk in self.blocks:
            x = blk(x, bias)
        return self.norm(x)


def sinusoidal_table(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.float()
