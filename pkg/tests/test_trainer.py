import copy
import math

import numpy as np
import pytest
import torch

from mmae import flowmix
from mmae.model import ModelConfig, loss_reconstruction, make_views, decode_views, unmix
from mmae.nn import checkpoint
from mmae.nn.checkpoint import IncompatibleCheckpoint
from mmae.trainer import (
    LOG_COLUMNS, DifficultyCache, FlowDataset, LabelOutOfRange, Pretrainer, TrainConfig,
    ema_update, finetune, load_classifier, load_pretrained, loss_log_csv, lr_at,
    momentum_schedule, pair_masks, save_classifier, split_indices,
)

TINY = ModelConfig.profile("tiny")


def tcfg(**kw):
    base = dict(total_steps=12, batch_size=8, seed=3, finetune_epochs=2, finetune_batch_size=16)
    return TrainConfig(**{**base, **kw})


def test_momentum_schedule():
    assert momentum_schedule(0, 100, 0.96, 0.99) == pytest.approx(0.96, abs=1e-15)
    assert momentum_schedule(100, 100, 0.96, 0.99) == 0.99
    assert momentum_schedule(50, 100, 0.96, 0.99) == pytest.approx(0.975)


def test_ema_update():
    t, s = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
    before = copy.deepcopy(t.state_dict())
    ema_update(t, s, 1.0)
    assert all(torch.equal(before[k], v) for k, v in t.state_dict().items())
    ema_update(t, s, 0.0)
    assert all(torch.equal(s.state_dict()[k], v) for k, v in t.state_dict().items())
    with torch.no_grad():
        for p in t.parameters():
            p.zero_()
        for p in s.parameters():
            p.fill_(2.0)
    ema_update(t, s, 0.5)
    assert all((p == 1).all() for p in t.parameters())
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 3), 0.5)


def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 0.05) == pytest.approx(0.2)
    assert lr_at(4, 100, 1.0, 0.05) == pytest.approx(1.0)
    assert lr_at(5, 100, 1.0, 0.05) == pytest.approx(1.0)
    assert lr_at(99, 100, 1.0, 0.05) < 0.01
    values = [lr_at(s, 100, 1.0, 0.05) for s in range(5, 100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_train_config_round_trip_and_validation():
    cfg = tcfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"steps": 3})
    with pytest.raises(ValueError):
        TrainConfig(m_base=0.999, m_final=0.99)


def test_difficulty_cache():
    c = DifficultyCache()
    assert c.get(3) is None
    c.put(3, 0, np.ones(4))
    c.put(3, 1, np.zeros(4))
    assert (c.get(3) == 0).all()
    with pytest.raises(ValueError):
        c.put(3, 0, np.ones(4))
    with pytest.raises(ValueError):
        c.put(4, 5, np.array([np.nan]))


def test_pair_masks_shared_and_fallback():
    cache = DifficultyCache()
    idx = np.array([10, 11, 12, 13, 14])
    pairs = np.array([1, 0, 3, 2, 4])
    masks = pair_masks(pairs, idx, cache, 16, 0.75, 0.25, seed=0, epoch=1, eta=10.0)
    assert masks[0] is masks[1] and masks[2] is masks[3]
    assert all(len(mk.hard_indices) == 0 for mk in masks)  # cache miss -> random only
    d = np.zeros(16)
    d[[2, 5, 9, 11]] = 1.0
    cache.put(10, 0, d)
    masks = pair_masks(pairs, idx, cache, 16, 0.75, 0.25, seed=0, epoch=1, eta=10.0)
    assert list(masks[0].hard_indices) == [2, 5, 9, 11]
    assert len(masks[2].hard_indices) == 0


def test_pretrain_deterministic(small_dataset):
    a = Pretrainer(small_dataset, TINY, tcfg())
    b = Pretrainer(small_dataset, TINY, tcfg())
    ra, rb = a.run(until=6), b.run(until=6)
    assert ra == rb
    ta, tb = a.state_tensors()[0], b.state_tensors()[0]
    assert all(torch.equal(ta[k], tb[k]) for k in ta)


def test_loss_identity_and_log_fields(small_dataset):
    tr = Pretrainer(small_dataset, TINY, tcfg())
    rows = tr.run(until=8)
    for r in rows:
        assert r["L_pre"] == pytest.approx(r["L_rec"] + TINY.lambda1 * r["L_pred"]
                                           + TINY.lambda2 * r["L_align"], abs=1e-6)
        epoch = r["step"] // tr.steps_per_epoch
        assert r["r_hard"] == flowmix.hard_ratio(epoch, tr.total_epochs, tr.tcfg.r_max)
        assert r["m_t"] == momentum_schedule(r["step"], tr.tcfg.total_steps, 0.96, 0.99)
    csv_text = loss_log_csv(rows)
    assert csv_text.splitlines()[0].split(",") == LOG_COLUMNS
    assert len(csv_text.splitlines()) == 9


def test_component_isolation(small_dataset):
    cfg = ModelConfig.profile("tiny", lambda1=0.0, lambda2=0.0)
    tr = Pretrainer(small_dataset, cfg, tcfg())
    model0 = copy.deepcopy(tr.model)
    idx, epoch = tr.batch_indices(0)
    pairs, masks, _ = copy.deepcopy(tr).prepare(idx, epoch)
    row = tr.pretrain_step()
    assert row["L_pre"] == pytest.approx(row["L_rec"], abs=0)

    # the same reconstruction loss, assembled by hand from the initial parameters
    with torch.no_grad():
        x = torch.as_tensor(small_dataset.flow_bytes[idx])
        m = torch.as_tensor(np.stack([mk.m for mk in masks]))
        main = model0.embed.embed_patches(x)
        mixed = flowmix.mix(main, main[torch.as_tensor(pairs)], m)
        z = model0.student.encoder(flowmix.assemble_student_input(mixed, model0.embed))
        v_main, v_supp = make_views(z[:, 1:], m, model0.mask_token)
        h_main, h_supp = decode_views(model0.student.decoder, v_main, v_supp, model0.student.dec_pos)
        l_rec, _ = loss_reconstruction(unmix(h_main, h_supp, m, pairs),
                                       flowmix.patchify(x, cfg.patch_size), model0.recon_head)
    assert row["L_rec"] == pytest.approx(l_rec.item(), rel=1e-5)


def test_teacher_is_closed_form_ema(small_dataset):
    tr = Pretrainer(small_dataset, TINY, tcfg())
    replay = {n: p.detach().double().clone() for n, p in tr.model.teacher.named_parameters()}
    for _ in range(8):
        row = tr.pretrain_step()
        student = dict(tr.model.student.named_parameters())
        for n in replay:
            replay[n] = row["m_t"] * replay[n] + (1 - row["m_t"]) * student[n].detach().double()
    for n, p in tr.model.teacher.named_parameters():
        assert torch.allclose(p.double(), replay[n], atol=1e-6), n


def test_cache_filled_after_epoch(small_dataset):
    tr = Pretrainer(small_dataset, TINY, tcfg())
    tr.run(until=tr.steps_per_epoch)
    seen = set()
    for step in range(tr.steps_per_epoch):
        seen.update(int(i) for i in tr.batch_indices(step)[0])
    assert set(tr.cache.entries) == seen
    assert all(np.isfinite(v).all() for _, v in tr.cache.entries.values())


def test_resume_is_bitwise(tmp_path, small_dataset):
    straight = Pretrainer(small_dataset, TINY, tcfg())
    straight.run(tmp_path / "a")

    first = Pretrainer(small_dataset, TINY, tcfg())
    first.run(until=7)
    first.save(tmp_path / "mid.ckpt")
    resumed = Pretrainer.restore(tmp_path / "mid.ckpt", small_dataset)
    (tmp_path / "b").mkdir()
    resumed.run(tmp_path / "b")

    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    assert (tmp_path / "a" / "pretrain.ckpt").read_bytes() == (tmp_path / "b" / "pretrain.ckpt").read_bytes()


def test_periodic_checkpoints(tmp_path, small_dataset):
    Pretrainer(small_dataset, TINY, tcfg(total_steps=6, checkpoint_every=3)).run(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"pretrain_step3.ckpt", "pretrain_step6.ckpt",
                                                     "pretrain.ckpt", "loss_log.csv"}


def test_split_indices_partition():
    labels = np.repeat(np.arange(3), 20)
    tr, va, te = split_indices(labels, 0)
    assert len(set(tr) | set(va) | set(te)) == 60 and len(tr) + len(va) + len(te) == 60
    for c in range(3):
        assert (labels[tr] == c).sum() == 16 and (labels[va] == c).sum() == 2


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, small_corpus):
    records, _, feats, _ = small_corpus
    ds = FlowDataset.from_records(records, feats)
    out = tmp_path_factory.mktemp("pre")
    Pretrainer(ds, TINY, tcfg(total_steps=4)).run(out)
    return out / "pretrain.ckpt"


def test_finetune_leaves_pretrained_untouched(pretrained, small_dataset):
    model = load_pretrained(pretrained)
    before = copy.deepcopy(model.state_dict())
    res = finetune(small_dataset, model, tcfg())
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert len(res.history) == 2 and 0 <= res.metrics["accuracy"] <= 1


def test_finetune_single_class(pretrained, small_dataset):
    ds = small_dataset.subset(np.flatnonzero(small_dataset.labels == 0))
    ds.labels[:] = 0
    res = finetune(ds, load_pretrained(pretrained), tcfg(), n_classes=1)
    assert res.metrics["accuracy"] == 1.0 and res.metrics["weighted_f1"] == 1.0


def test_frozen_encoder_updates_head_only(pretrained, small_dataset):
    model = load_pretrained(pretrained)
    res = finetune(small_dataset, model, tcfg(frozen_encoder=True))
    for n, p in res.classifier.encoder.state_dict().items():
        assert torch.equal(p, model.student.encoder.state_dict()[n])
    for n, p in res.classifier.embed.state_dict().items():
        assert torch.equal(p, model.embed.state_dict()[n])


def test_label_and_checkpoint_errors(tmp_path, pretrained, small_dataset):
    ds = small_dataset.subset(np.arange(len(small_dataset)))
    ds.labels[0] = -1
    with pytest.raises(LabelOutOfRange):
        finetune(ds, load_pretrained(pretrained), tcfg())
    with pytest.raises(LabelOutOfRange):
        finetune(small_dataset, load_pretrained(pretrained), tcfg(), n_classes=2)

    res = finetune(small_dataset, load_pretrained(pretrained), tcfg(finetune_epochs=1))
    save_classifier(tmp_path / "ft.ckpt", res.classifier, res.n_classes)
    clf, k = load_classifier(tmp_path / "ft.ckpt")
    assert k == res.n_classes
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(tmp_path / "ft.ckpt")
    with pytest.raises(IncompatibleCheckpoint):
        load_classifier(pretrained)

    tensors, meta = checkpoint.load(pretrained)
    meta["model"]["dim"] = 16
    checkpoint.save(tmp_path / "bad.ckpt", tensors, meta)
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained(tmp_path / "bad.ckpt")
