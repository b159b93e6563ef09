"""Twin masked autoencoder with a packet-importance mask predictor."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flowmix import FlowEmbedding, assemble_student_input, assemble_teacher_input, mix, patchify
from .ingest import FLOW_BYTES
from .matcher import StatEncoder
from .nn.gradcheck import NonFiniteLoss
from .nn.ops import Stack, cosine_similarity, sinusoidal_table

BIAS_CLAMP = 5.0


class EmptyPairSample(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 32
    encoder_depth: int = 2
    decoder_depth: int = 1
    heads: int = 4
    n_x: int = 400
    patch_size: int = 4
    mlp_ratio: int = 4
    d_stat: int = 64
    rank_r: int = 16
    pmp_depth: int = 2
    lambda1: float = 1.0
    lambda2: float = 0.1
    recon_target: str = "raw_bytes"
    rank_pairs: int = 1024

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.n_x * self.patch_size != FLOW_BYTES:
            raise ValueError(f"n_x * patch_size must be {FLOW_BYTES}")
        if self.recon_target not in ("raw_bytes", "embedded_detached"):
            raise ValueError(f"unknown recon_target {self.recon_target!r}")

    @classmethod
    def profile(cls, name: str, **overrides) -> "ModelConfig":
        base = {
            "desk": {},
            "paper": dict(dim=256, encoder_depth=7, decoder_depth=2, heads=4),
            "tiny": dict(dim=8, encoder_depth=2, decoder_depth=1, heads=2, n_x=16,
                         patch_size=100, d_stat=8, rank_r=4, rank_pairs=64),
        }[name]
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def standardize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return (x - x.mean()) / torch.sqrt(x.var(unbiased=False) + eps)


class MaskPredictor(nn.Module):
    """Predicts per-patch reconstruction difficulty under a statistics-driven attention bias."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.d_stat
        self.conv_t = nn.Conv1d(1, c, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.conv_l = nn.Conv1d(1, c, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pe_t = nn.Parameter(sinusoidal_table(cfg.n_x, c))
        self.pe_l = nn.Parameter(sinusoidal_table(cfg.n_x, c))
        self.fuse = nn.Linear(2 * c, c)
        self.norm = nn.LayerNorm(c)
        r = cfg.rank_r
        self.w_u_sup = nn.Parameter(torch.randn(c, r) / math.sqrt(c))
        self.w_y_sup = nn.Parameter(torch.randn(c, r) / math.sqrt(c))
        self.w_u_enh = nn.Parameter(torch.randn(c, r) / math.sqrt(c))
        self.w_y_enh = nn.Parameter(torch.randn(c, r) / math.sqrt(c))
        self.sal = nn.Linear(1, 1)
        self.ctx = nn.Linear(c, 1)
        self.w_a = nn.Linear(3, r, bias=False)
        self.w_b = nn.Linear(3, r, bias=False)
        self.gamma_sup = nn.Parameter(torch.zeros(()))
        self.gamma_enh = nn.Parameter(torch.zeros(()))
        self.predictor = Stack(cfg.dim, cfg.pmp_depth, cfg.heads, cfg.mlp_ratio)
        self.head = nn.Linear(cfg.dim, 1)

    def stat_context(self, s_time: torch.Tensor, s_len: torch.Tensor) -> torch.Tensor:
        """(B, 5) raw packet signals -> (B, N_x, d_stat); signals standardized over the batch."""
        per_packet = FLOW_BYTES // s_time.shape[1]
        e_t = self.conv_t(standardize(s_time).repeat_interleave(per_packet, 1).unsqueeze(1))
        e_l = self.conv_l(standardize(s_len).repeat_interleave(per_packet, 1).unsqueeze(1))
        e_t = e_t.transpose(1, 2) + self.pe_t
        e_l = e_l.transpose(1, 2) + self.pe_l
        return self.norm(self.fuse(torch.cat([e_t, e_l], dim=-1)))

    def low_rank(self, z_stat, policy: str) -> torch.Tensor:
        w_u = getattr(self, f"w_u_{policy}")
        w_y = getattr(self, f"w_y_{policy}")
        return (z_stat @ w_u) @ (z_stat @ w_y).transpose(1, 2) / math.sqrt(self.cfg.rank_r)

    def gate(self, z_stat, v_main) -> torch.Tensor:
        unit = v_main / v_main.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        cos = unit @ unit.transpose(1, 2)
        f_sim = F.relu(cos).mean(-1, keepdim=True)
        f_sal = self.sal(v_main.norm(dim=-1, keepdim=True))
        f_ctx = self.ctx(z_stat)
        f_gate = torch.cat([f_sim, f_sal, f_ctx], dim=-1)
        return torch.sigmoid(self.w_a(f_gate) @ self.w_b(f_gate).transpose(1, 2))

    def bias(self, z_stat, v_main) -> torch.Tensor:
        p_sup = self.gate(z_stat, v_main)
        sup = -F.softplus(self.gamma_sup) * self.low_rank(z_stat, "sup")
        enh = F.softplus(self.gamma_enh) * self.low_rank(z_stat, "enh")
        return torch.clamp(p_sup * sup + (1 - p_sup) * enh, -BIAS_CLAMP, BIAS_CLAMP)

    def predict(self, z_patches, b_attn) -> torch.Tensor:
        return self.head(self.predictor(z_patches, b_attn)).squeeze(-1)


class Branch(nn.Module):
    """Encoder, decoder and decoder positional table; mirrored by the teacher."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = Stack(cfg.dim, cfg.encoder_depth, cfg.heads, cfg.mlp_ratio)
        self.decoder = Stack(cfg.dim, cfg.decoder_depth, cfg.heads, cfg.mlp_ratio)
        self.dec_pos = nn.Parameter(sinusoidal_table(cfg.n_x, cfg.dim).unsqueeze(0))


@dataclass
class ForwardArtifacts:
    z_student: torch.Tensor
    v_main: torch.Tensor
    v_supp: torch.Tensor
    h_main: torch.Tensor
    h_supp: torch.Tensor
    h_unmix: torch.Tensor
    h_teacher: torch.Tensor
    b_attn: torch.Tensor
    difficulty: torch.Tensor
    per_patch_rec: torch.Tensor
    l_rec: torch.Tensor
    l_pred: torch.Tensor
    l_align: torch.Tensor
    l_pre: torch.Tensor


def make_views(z_patches, m, e_mask):
    m = m.to(z_patches.dtype).unsqueeze(-1)
    v_main = z_patches * (1 - m) + e_mask * m
    v_supp = z_patches * m + e_mask * (1 - m)
    return v_main, v_supp


def decode_views(decoder: Stack, v_main, v_supp, e_pos_dec):
    h = decoder(torch.cat([v_main, v_supp], dim=0) + e_pos_dec)
    return h.split(v_main.shape[0], dim=0)


def unmix(h_main, h_supp, m, pairs):
    pairs = torch.as_tensor(pairs, dtype=torch.long, device=h_supp.device)
    h_aligned = h_supp.index_select(0, pairs)
    m = m.to(h_main.dtype).unsqueeze(-1)
    return h_main * m + h_aligned * (1 - m)


def loss_reconstruction(h_unmix, target, head=None):
    """Mean squared error; returns (scalar, per-patch vector averaged over the last dim)."""
    pred = head(h_unmix) if head is not None else h_unmix
    per_patch = ((pred - target) ** 2).mean(-1)
    return per_patch.mean(), per_patch


def loss_rank(difficulty, per_patch_rec, pair_index):
    """RankNet-style pairwise loss.

    ``pair_index`` is (P, 2) shared across the batch or (B, P, 2). The
    reconstruction losses only define targets and receive no gradient.
    """
    if pair_index.numel() == 0:
        raise EmptyPairSample("no pairs sampled")
    rec = per_patch_rec.detach()
    if difficulty.dim() == 1:
        difficulty, rec = difficulty.unsqueeze(0), rec.unsqueeze(0)
    if pair_index.dim() == 2:
        pair_index = pair_index.unsqueeze(0).expand(difficulty.shape[0], -1, -1)
    i, j = pair_index[..., 0], pair_index[..., 1]
    delta = difficulty.gather(1, i) - difficulty.gather(1, j)
    r_i, r_j = rec.gather(1, i), rec.gather(1, j)
    pos = (r_i > r_j).to(delta.dtype)
    neg = (r_i < r_j).to(delta.dtype)
    return (F.binary_cross_entropy_with_logits(delta, pos)
            + F.binary_cross_entropy_with_logits(-delta, neg))


def loss_align(h_unmix, h_teacher):
    return 1 - cosine_similarity(h_unmix, h_teacher.detach()).mean()


def total_pretrain_loss(l_rec, l_pred, l_align, lambda1=1.0, lambda2=0.1):
    total = l_rec + lambda1 * l_pred + lambda2 * l_align
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"L_pre={total.item()} (L_rec={l_rec.item()}, L_pred={l_pred.item()}, "
            f"L_align={l_align.item()})"
        )
    return total


def sample_rank_pairs(n_x: int, n_pairs: int, batch: int, generator: torch.Generator) -> torch.Tensor:
    """(batch, n_pairs, 2) uniform pairs with i != j."""
    i = torch.randint(0, n_x, (batch, n_pairs), generator=generator)
    j = (i + torch.randint(1, n_x, (batch, n_pairs), generator=generator)) % n_x
    return torch.stack([i, j], dim=-1)


class MMAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.matcher = StatEncoder()
        self.embed = FlowEmbedding(cfg.n_x, cfg.patch_size, cfg.dim)
        self.student = Branch(cfg)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.recon_head = nn.Linear(cfg.dim, cfg.patch_size)
        self.pmp = MaskPredictor(cfg)
        nn.init.normal_(self.mask_token, std=0.02)
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)

    def trainable(self):
        """Named parameters updated by gradient during pre-training."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("teacher.")]

    def student_encode(self, x_student):
        return self.student.encoder(x_student)

    @torch.no_grad()
    def teacher_forward(self, x_teacher):
        z = self.teacher.encoder(x_teacher)[:, 1:]
        return self.teacher.decoder(z + self.teacher.dec_pos)

    def forward(self, flow_bytes, s_time, s_len, pairs, m, rank_index, frozen=None) -> ForwardArtifacts:
        """One pre-training forward pass.

        ``frozen`` optionally supplies the stop-gradient quantities
        (``recon_target``, ``rank_rec``, ``h_teacher``) from an earlier pass,
        so the loss becomes a function of the trainable parameters alone.
        Finite-difference checks need this.
        """
        cfg = self.cfg
        frozen = frozen or {}
        m = torch.as_tensor(np.asarray(m), device=flow_bytes.device)
        pairs_t = torch.as_tensor(np.asarray(pairs), dtype=torch.long)
        x_main = self.embed.embed_patches(flow_bytes)
        x_mix = mix(x_main, x_main.index_select(0, pairs_t), m)
        z = self.student_encode(assemble_student_input(x_mix, self.embed))
        z_patches = z[:, 1:]
        v_main, v_supp = make_views(z_patches, m, self.mask_token)
        h_main, h_supp = decode_views(self.student.decoder, v_main, v_supp, self.student.dec_pos)
        h_unmix = unmix(h_main, h_supp, m, pairs_t)

        if cfg.recon_target == "raw_bytes":
            l_rec, per_patch = loss_reconstruction(h_unmix, patchify(flow_bytes, cfg.patch_size),
                                                   self.recon_head)
        else:
            l_rec, per_patch = loss_reconstruction(h_unmix, frozen.get("recon_target", x_main.detach()))

        z_stat = self.pmp.stat_context(s_time, s_len)
        b_attn = self.pmp.bias(z_stat, v_main)
        difficulty = self.pmp.predict(z_patches, b_attn)
        l_pred = loss_rank(difficulty, frozen.get("rank_rec", per_patch), rank_index)

        h_teacher = frozen.get("h_teacher")
        if h_teacher is None:
            h_teacher = self.teacher_forward(assemble_teacher_input(x_main.detach(), self.embed).detach())
        l_align = loss_align(h_unmix, h_teacher)
        l_pre = total_pretrain_loss(l_rec, l_pred, l_align, cfg.lambda1, cfg.lambda2)
        return ForwardArtifacts(z, v_main, v_supp, h_main, h_supp, h_unmix, h_teacher, b_attn,
                                difficulty, per_patch, l_rec, l_pred, l_align, l_pre)


class Classifier(nn.Module):
    """Student embedding + encoder with a linear head on the class token."""

    def __init__(self, cfg: ModelConfig, n_classes: int):
        super().__init__()
        self.cfg = cfg
        self.embed = FlowEmbedding(cfg.n_x, cfg.patch_size, cfg.dim)
        self.encoder = Stack(cfg.dim, cfg.encoder_depth, cfg.heads, cfg.mlp_ratio)
        self.head = nn.Linear(cfg.dim, n_classes)

    @classmethod
    def from_pretrained(cls, model: MMAE, n_classes: int) -> "Classifier":
        clf = cls(model.cfg, n_classes)
        clf.embed.load_state_dict(model.embed.state_dict())
        clf.encoder.load_state_dict(model.student.encoder.state_dict())
        return clf

    def forward(self, flow_bytes):
        x = assemble_teacher_input(self.embed.embed_patches(flow_bytes), self.embed)
        return self.head(self.encoder(x)[:, 0])
