"""Statistics-based flow matching: feature encoder and greedy symmetric pairing."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .side_channel import N_FEATURES

STAT_EMBED_DIM = N_FEATURES + 64


class BatchTooSmall(ValueError):
    pass


class StatEncoder(nn.Module):
    """BatchNorm -> two 1-D convs -> adaptive max-pool -> MLP, concatenated with the normalized input."""

    def __init__(self, n_features: int = N_FEATURES, channels=(16, 32), pool_width: int = 8,
                 out_dim: int = 64):
        super().__init__()
        self.norm = nn.BatchNorm1d(n_features, eps=1e-5, momentum=0.1)
        self.conv1 = nn.Conv1d(1, channels[0], kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(channels[0], channels[1], kernel_size=3, padding=1)
        self.pool = nn.AdaptiveMaxPool1d(pool_width)
        self.mlp = nn.Linear(channels[1] * pool_width, out_dim)

    def forward(self, x_stat: torch.Tensor) -> torch.Tensor:
        if self.training and x_stat.shape[0] < 2:
            raise BatchTooSmall("batch norm needs at least 2 flows in train mode")
        x_norm = self.norm(x_stat)
        h = F.relu(self.conv1(x_norm.unsqueeze(1)))
        h = F.relu(self.conv2(h))
        f_deep = F.relu(self.mlp(self.pool(h).flatten(1)))
        return torch.cat([x_norm, f_deep], dim=1)


def encode_stats(encoder: StatEncoder, x_stat: torch.Tensor, mode: str = "train") -> torch.Tensor:
    encoder.train(mode == "train")
    return encoder(x_stat)


def argmax_2d(s: np.ndarray) -> tuple[int, int]:
    """Row-major first occurrence of the maximum."""
    flat = int(np.argmax(s))
    return divmod(flat, s.shape[1])


def build_pairs(embeddings) -> np.ndarray:
    """Greedy symmetric pairing by cosine similarity.

    Returns p with p[p[i]] == i; an index left without a partner maps to itself.
    """
    f = np.asarray(
        embeddings.detach().cpu().numpy() if isinstance(embeddings, torch.Tensor) else embeddings,
        dtype=np.float64,
    )
    b = f.shape[0]
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = f / np.maximum(norms, 1e-12)
    s = f @ f.T
    np.fill_diagonal(s, -np.inf)
    p = np.arange(b)
    for _ in range(b // 2):
        row, col = argmax_2d(s)
        if s[row, col] == -np.inf:
            break
        p[row], p[col] = col, row
        s[[row, col], :] = -np.inf
        s[:, [row, col]] = -np.inf
    return p
