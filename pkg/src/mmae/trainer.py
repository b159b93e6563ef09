"""Pre-training with flow mixing and an EMA teacher, then supervised fine-tuning."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import flowmix
from .evalkit import basic_metrics, confusion_matrix
from .matcher import build_pairs, encode_stats
from .model import MMAE, Classifier, ModelConfig, sample_rank_pairs
from .nn import checkpoint
from .nn.checkpoint import IncompatibleCheckpoint
from .nn.optim import OptimState, adamw_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_rec", "L_pred", "L_align", "L_pre", "m_t", "r_hard"]


class LabelOutOfRange(ValueError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 200
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    m_base: float = 0.96
    m_final: float = 0.99
    r_max: float = 0.2
    r_rand: float = 0.7
    mask_cap: float = 0.9
    eta: float = flowmix.HARD_NOISE_OFFSET
    seed: int = 0
    checkpoint_every: int = 0
    finetune_epochs: int = 30
    finetune_batch_size: int = 64
    finetune_lr: float = 2e-3
    frozen_encoder: bool = False

    def __post_init__(self):
        if not 0.0 <= self.m_base <= self.m_final <= 1.0:
            raise ValueError("need 0 <= m_base <= m_final <= 1")
        if self.batch_size < 2:
            raise ValueError("pre-training batch size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FlowDataset:
    flow_bytes: np.ndarray      # (N, 1600) float32
    features: np.ndarray        # (N, 27) float64
    s_time: np.ndarray          # (N, 5)
    s_len: np.ndarray           # (N, 5)
    labels: np.ndarray          # (N,) int, -1 when unlabeled
    flow_ids: np.ndarray

    def __len__(self):
        return len(self.flow_bytes)

    @classmethod
    def from_records(cls, records, features) -> "FlowDataset":
        return cls(
            flow_bytes=np.stack([r.bytes for r in records]).astype(np.float32),
            features=np.asarray(features, dtype=np.float64),
            s_time=np.stack([r.pkt_inter_arrival for r in records]).astype(np.float64),
            s_len=np.stack([r.pkt_payload_len for r in records]).astype(np.float64),
            labels=np.array([r.label for r in records], dtype=np.int64),
            flow_ids=np.array([r.flow_id for r in records], dtype=np.int64),
        )

    def subset(self, idx) -> "FlowDataset":
        idx = np.asarray(idx)
        return FlowDataset(self.flow_bytes[idx], self.features[idx], self.s_time[idx],
                           self.s_len[idx], self.labels[idx], self.flow_ids[idx])


class DifficultyCache:
    """Latest predicted per-patch difficulty for each dataset index."""

    def __init__(self):
        self.entries: dict[int, tuple[int, np.ndarray]] = {}

    def get(self, idx: int):
        hit = self.entries.get(int(idx))
        return None if hit is None else hit[1]

    def put(self, idx: int, step: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32)
        if not np.isfinite(values).all():
            raise ValueError(f"non-finite difficulty for sample {idx}")
        prev = self.entries.get(int(idx))
        if prev is not None and prev[0] > step:
            raise ValueError("cache writes must be monotone in step")
        self.entries[int(idx)] = (step, values.copy())

    def __len__(self):
        return len(self.entries)


def momentum_schedule(t: float, total: float, m_base: float, m_final: float) -> float:
    return m_final + 0.5 * (m_base - m_final) * (1 + math.cos(math.pi * t / total))


@torch.no_grad()
def ema_update(teacher, student, m: float) -> None:
    t_params = dict(teacher.named_parameters())
    for name, p_s in student.named_parameters():
        p_t = t_params[name]
        if p_t.shape != p_s.shape:
            raise ValueError(f"{name}: teacher {tuple(p_t.shape)} vs student {tuple(p_s.shape)}")
        p_t.mul_(m).add_(p_s, alpha=1 - m)


def lr_at(step: int, total: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warmup = max(1, int(round(warmup_frac * total)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def pair_masks(pairs, idx, cache: DifficultyCache, n_x: int, r_mask: float, r_hard: float,
               seed: int, epoch: int, eta: float) -> list[flowmix.MixMask]:
    """One mask per pair, shared by both members so the two views stay complementary."""
    masks: list = [None] * len(pairs)
    for a, b in enumerate(pairs):
        if masks[a] is not None:
            continue
        diffs = [d for d in (cache.get(idx[a]), cache.get(idx[b])) if d is not None]
        difficulty = np.mean(diffs, axis=0) if diffs else None
        rng = np.random.default_rng([seed, int(idx[min(a, b)]), epoch])
        mk = flowmix.build_mask(difficulty, r_mask, r_hard if diffs else 0.0, rng, n_x=n_x, eta=eta)
        masks[a] = masks[b] = mk
    return masks


class Pretrainer:
    def __init__(self, dataset: FlowDataset, model_cfg: ModelConfig, train_cfg: TrainConfig):
        self.data = dataset
        self.mcfg = model_cfg
        self.tcfg = train_cfg
        _seed_all(train_cfg.seed)
        self.model = MMAE(model_cfg)
        self.opt = OptimState(lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay)
        self.cache = DifficultyCache()
        self.step = 0
        self.log_rows: list[dict] = []
        self.steps_per_epoch = len(dataset) // train_cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError("dataset smaller than one batch")
        self.total_epochs = math.ceil(train_cfg.total_steps / self.steps_per_epoch)

    def batch_indices(self, step: int) -> tuple[np.ndarray, int]:
        epoch, within = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.tcfg.seed, epoch]).permutation(len(self.data))
        b = self.tcfg.batch_size
        return perm[within * b:(within + 1) * b], epoch

    def prepare(self, idx: np.ndarray, epoch: int):
        """Stats encoding, pairing and masks for one batch."""
        d = self.data
        x_stat = torch.as_tensor(d.features[idx], dtype=torch.float32)
        emb = encode_stats(self.model.matcher, x_stat, "train")
        pairs = build_pairs(emb.detach())
        r_hard = flowmix.hard_ratio(epoch, self.total_epochs, self.tcfg.r_max)
        r_mask = flowmix.total_mask_ratio(self.tcfg.r_rand, r_hard, self.tcfg.mask_cap)
        masks = pair_masks(pairs, idx, self.cache, self.mcfg.n_x, r_mask, r_hard,
                           self.tcfg.seed, epoch, self.tcfg.eta)
        return pairs, masks, r_hard

    def pretrain_step(self) -> dict:
        t = self.step
        idx, epoch = self.batch_indices(t)
        pairs, masks, r_hard = self.prepare(idx, epoch)
        d = self.data
        gen = torch.Generator().manual_seed(self.tcfg.seed * 1_000_003 + t)
        rank_index = sample_rank_pairs(self.mcfg.n_x, self.mcfg.rank_pairs, len(idx), gen)

        self.model.train()
        for _, p in self.model.trainable():
            p.grad = None
        art = self.model(
            torch.as_tensor(d.flow_bytes[idx]),
            torch.as_tensor(d.s_time[idx], dtype=torch.float32),
            torch.as_tensor(d.s_len[idx], dtype=torch.float32),
            pairs,
            np.stack([mk.m for mk in masks]),
            rank_index,
        )
        art.l_pre.backward()
        self.opt.lr = lr_at(t, self.tcfg.total_steps, self.tcfg.base_lr, self.tcfg.warmup_frac)
        adamw_step(self.model.trainable(), self.opt)
        m_t = momentum_schedule(t, self.tcfg.total_steps, self.tcfg.m_base, self.tcfg.m_final)
        ema_update(self.model.teacher, self.model.student, m_t)
        diff = art.difficulty.detach().numpy()
        for row, sample in enumerate(idx):
            self.cache.put(sample, t, diff[row])

        self.step += 1
        row = {
            "step": t,
            "L_rec": art.l_rec.item(),
            "L_pred": art.l_pred.item(),
            "L_align": art.l_align.item(),
            "L_pre": art.l_pre.item(),
            "m_t": m_t,
            "r_hard": r_hard,
        }
        self.log_rows.append(row)
        return row

    def run(self, out_dir=None, until: int | None = None) -> list[dict]:
        until = self.tcfg.total_steps if until is None else min(until, self.tcfg.total_steps)
        every = self.tcfg.checkpoint_every
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
        while self.step < until:
            row = self.pretrain_step()
            if row["step"] % 20 == 0:
                log.info("step %d L_pre %.4f L_rec %.4f", row["step"], row["L_pre"], row["L_rec"])
            if out_dir is not None and every and self.step % every == 0:
                self.save(Path(out_dir) / f"pretrain_step{self.step}.ckpt")
        if out_dir is not None:
            self.save(Path(out_dir) / "pretrain.ckpt")
            Path(out_dir, "loss_log.csv").write_text(loss_log_csv(self.log_rows))
        return self.log_rows

    def state_tensors(self) -> tuple[dict, dict]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for name, v in self.opt.exp_avg.items():
            tensors[f"optim.exp_avg.{name}"] = v
            tensors[f"optim.exp_avg_sq.{name}"] = self.opt.exp_avg_sq[name]
        cache_steps = {}
        for idx, (step, values) in self.cache.entries.items():
            tensors[f"cache.{idx}"] = torch.from_numpy(values)
            cache_steps[str(idx)] = step
        meta = {
            "kind": "pretrain",
            "model": self.mcfg.to_dict(),
            "train": self.tcfg.to_dict(),
            "step": self.step,
            "optim_step": self.opt.step,
            "cache_steps": cache_steps,
            "log": self.log_rows,
        }
        return tensors, meta

    def save(self, path) -> None:
        tensors, meta = self.state_tensors()
        checkpoint.save(path, tensors, meta)

    @classmethod
    def restore(cls, path, dataset: FlowDataset, train_cfg: TrainConfig | None = None) -> "Pretrainer":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "pretrain":
            raise IncompatibleCheckpoint("not a pre-training checkpoint")
        tcfg = train_cfg or TrainConfig.from_dict(meta["train"])
        trainer = cls(dataset, ModelConfig.from_dict(meta["model"]), tcfg)
        load_model_state(trainer.model, tensors)
        trainer.opt.step = meta["optim_step"]
        for key, v in tensors.items():
            if key.startswith("optim.exp_avg_sq."):
                trainer.opt.exp_avg_sq[key[len("optim.exp_avg_sq."):]] = v
            elif key.startswith("optim.exp_avg."):
                trainer.opt.exp_avg[key[len("optim.exp_avg."):]] = v
            elif key.startswith("cache."):
                idx = key[len("cache."):]
                trainer.cache.put(int(idx), meta["cache_steps"][idx], v.numpy())
        trainer.step = meta["step"]
        trainer.log_rows = list(meta["log"])
        return trainer


def load_model_state(model, tensors: dict, prefix: str = "model.") -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc


def load_pretrained(path) -> MMAE:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "pretrain":
        raise IncompatibleCheckpoint("not a pre-training checkpoint")
    model = MMAE(ModelConfig.from_dict(meta["model"]))
    load_model_state(model, tensors)
    return model


def loss_log_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def pretrain(dataset: FlowDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
             out_dir=None) -> Pretrainer:
    trainer = Pretrainer(dataset, model_cfg, train_cfg)
    trainer.run(out_dir)
    return trainer


# --- fine-tuning -----------------------------------------------------------

def split_indices(labels: np.ndarray, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Per-class seeded 8:1:1 split -> (train, val, test) index arrays."""
    rng = np.random.default_rng([seed, 7])
    parts = ([], [], [])
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train:n_train + n_val])
        parts[2].extend(members[n_train + n_val:])
    return tuple(np.sort(np.array(p, dtype=np.int64)) for p in parts)


@torch.no_grad()
def predict(clf: Classifier, dataset: FlowDataset, batch_size: int = 128) -> np.ndarray:
    clf.eval()
    out = []
    for start in range(0, len(dataset), batch_size):
        logits = clf(torch.as_tensor(dataset.flow_bytes[start:start + batch_size]))
        out.append(logits.argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(clf: Classifier, dataset: FlowDataset, n_classes: int) -> dict:
    pred = predict(clf, dataset)
    return basic_metrics(confusion_matrix(dataset.labels, pred, n_classes))


@dataclass
class FinetuneResult:
    classifier: Classifier
    metrics: dict
    history: list
    n_classes: int


def finetune(dataset: FlowDataset, pretrained: MMAE, train_cfg: TrainConfig,
             n_classes: int | None = None) -> FinetuneResult:
    """Train a class-token classifier on top of the pre-trained student encoder.

    The best-validation-accuracy epoch is kept; PMP and teacher weights are never touched.
    """
    labels = dataset.labels
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    _seed_all(train_cfg.seed)
    clf = Classifier.from_pretrained(pretrained, n_classes)
    train_idx, val_idx, _ = split_indices(labels, train_cfg.seed)
    train_set, val_set = dataset.subset(train_idx), dataset.subset(val_idx)
    if len(val_set) == 0:
        val_set = train_set

    params = [(n, p) for n, p in clf.named_parameters()
              if not train_cfg.frozen_encoder or n.startswith("head.")]
    opt = OptimState(lr=train_cfg.finetune_lr, weight_decay=train_cfg.weight_decay)
    bs = train_cfg.finetune_batch_size
    steps_per_epoch = math.ceil(len(train_set) / bs)
    total = steps_per_epoch * train_cfg.finetune_epochs
    best_acc, best_state, history = -1.0, None, []
    step = 0
    for epoch in range(train_cfg.finetune_epochs):
        clf.train()
        perm = np.random.default_rng([train_cfg.seed, 1000 + epoch]).permutation(len(train_set))
        losses = []
        for start in range(0, len(perm), bs):
            sel = perm[start:start + bs]
            for _, p in clf.named_parameters():
                p.grad = None
            logits = clf(torch.as_tensor(train_set.flow_bytes[sel]))
            loss = F.cross_entropy(logits, torch.as_tensor(train_set.labels[sel]))
            loss.backward()
            opt.lr = lr_at(step, total, train_cfg.finetune_lr, train_cfg.warmup_frac)
            adamw_step(params, opt)
            losses.append(loss.item())
            step += 1
        val = evaluate(clf, val_set, n_classes)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": val["accuracy"]})
        if val["accuracy"] > best_acc:
            best_acc, best_state = val["accuracy"], copy.deepcopy(clf.state_dict())
    clf.load_state_dict(best_state)
    metrics = evaluate(clf, val_set, n_classes)
    return FinetuneResult(clf, metrics, history, n_classes)


def save_classifier(path, clf: Classifier, n_classes: int, extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in clf.state_dict().items()}
    meta = {"kind": "finetune", "model": clf.cfg.to_dict(), "n_classes": n_classes, **(extra or {})}
    checkpoint.save(path, tensors, meta)


def load_classifier(path) -> tuple[Classifier, int]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "finetune":
        raise IncompatibleCheckpoint("not a fine-tuned checkpoint")
    clf = Classifier(ModelConfig.from_dict(meta["model"]), meta["n_classes"])
    load_model_state(clf, tensors)
    return clf, meta["n_classes"]
