"""Patching, curriculum hard-mask ratio, mix masks and input assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .nn.ops import check_same_shape, sinusoidal_table

HARD_NOISE_OFFSET = 10.0


class RatioOutOfRange(ValueError):
    pass


@dataclass
class MixMask:
    m: np.ndarray
    hard_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    r_mask: float = 0.0
    r_hard: float = 0.0

    @property
    def n_mask(self) -> int:
        return int(self.m.sum())

    @property
    def n_keep(self) -> int:
        return self.m.size - self.n_mask

    @property
    def r_rand(self) -> float:
        return self.r_mask - self.r_hard


def patchify(flow_bytes, patch_size: int = 4):
    """(..., L) -> (..., L // patch_size, patch_size), non-overlapping."""
    if flow_bytes.shape[-1] % patch_size:
        raise ValueError(f"length {flow_bytes.shape[-1]} not divisible by {patch_size}")
    return flow_bytes.reshape(*flow_bytes.shape[:-1], -1, patch_size)


def hard_ratio(t: float, t_total: float, r_max: float) -> float:
    if t_total <= 0:
        raise ValueError("t_total must be positive")
    return r_max * (t / t_total)


def total_mask_ratio(r_rand: float, r_hard: float, cap: float = 0.9) -> float:
    return min(r_rand + r_hard, cap)


def build_mask(difficulty, r_mask: float, r_hard: float, rng: np.random.Generator,
               n_x: int | None = None, eta: float = HARD_NOISE_OFFSET) -> MixMask:
    """Mix mask with the hardest patches forced into the masked set.

    ``difficulty`` may be None, in which case masking is purely random.
    """
    if not 0.0 <= r_hard <= r_mask <= 1.0:
        raise RatioOutOfRange(f"need 0 <= r_hard ({r_hard}) <= r_mask ({r_mask}) <= 1")
    if difficulty is not None:
        difficulty = np.asarray(difficulty, dtype=np.float64)
        n_x = difficulty.size
    if n_x is None:
        raise ValueError("n_x required when difficulty is absent")
    n_mask = math.floor(n_x * r_mask)
    n_keep = n_x - n_mask

    noise = rng.random(n_x)
    hard = np.zeros(0, dtype=np.int64)
    if difficulty is not None:
        k_hard = math.floor(n_x * r_hard)
        hard = np.sort(np.argsort(-difficulty, kind="stable")[:k_hard])
        noise[hard] += eta
    order = np.argsort(noise, kind="stable")
    m = np.zeros(n_x, dtype=np.int64)
    m[order[n_keep:]] = 1
    return MixMask(m=m, hard_indices=hard, r_mask=r_mask, r_hard=r_hard)


def mix(main: torch.Tensor, supp: torch.Tensor, m) -> torch.Tensor:
    """Take ``supp`` where m == 1 and ``main`` elsewhere; m broadcasts over the last dim."""
    check_same_shape(main, supp)
    m = torch.as_tensor(m, dtype=torch.bool, device=main.device)
    return torch.where(m.unsqueeze(-1), supp, main)


class FlowEmbedding(nn.Module):
    """Shared patch projection, class token and learnable positional table."""

    def __init__(self, n_x: int, patch_size: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size, dim)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(sinusoidal_table(n_x + 1, dim).unsqueeze(0))
        nn.init.normal_(self.cls, std=0.02)

    def embed_patches(self, flow_bytes: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(flow_bytes, self.patch_size))


def _assemble(tokens: torch.Tensor, embed: FlowEmbedding) -> torch.Tensor:
    cls = embed.cls.expand(tokens.shape[0], -1, -1)
    return torch.cat([cls, tokens], dim=1) + embed.pos


def assemble_student_input(mixed: torch.Tensor, embed: FlowEmbedding) -> torch.Tensor:
    return _assemble(mixed, embed)


def assemble_teacher_input(main: torch.Tensor, embed: FlowEmbedding) -> torch.Tensor:
    return _assemble(main, embed)


def mask_rows(masks: list[MixMask]) -> str:
    """Text dump, one 0/1 row per mask."""
    return "\n".join("".join(str(int(v)) for v in mk.m) for mk in masks) + "\n"
