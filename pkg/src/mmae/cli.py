"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 non-finite loss, 3 bad config, 4 I/O failure.
Log verbosity follows the MMAE_LOG environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit, flowmix
from .ingest import MalformedCapture, ParseStats, preprocess_capture, read_records, write_records
from .model import ModelConfig
from .nn.checkpoint import IncompatibleCheckpoint
from .nn.gradcheck import NonFiniteLoss
from .side_channel import extract_features, read_features_csv, write_features_csv
from .trainer import LabelOutOfRange, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_NONFINITE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4

RECORDS_FILE = "records.bin"
FEATURES_FILE = "features.csv"


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with 'model' and 'train' sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--profile", choices=["desk", "paper", "tiny"], default="desk")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. model.dim=64 or train.base_lr=5e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmae", description="Mixed masked autoencoder for encrypted traffic.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labeled PCAP corpus")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--flows", type=int, default=50, help="flows per class")
    p.add_argument("--kind", choices=evalkit.PROFILES, default="separable")

    p = sub.add_parser("preprocess", help="PCAP file or directory -> flow records + features")
    _common(p)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="synth manifest used to attach labels")

    p = sub.add_parser("featurize", help="PCAP -> side-channel feature CSV")
    _common(p)
    p.add_argument("--input", type=Path, required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by preprocess")
    p.add_argument("--steps", type=int)
    p.add_argument("--mask-ratio", type=float, help="random mask ratio r_rand")
    p.add_argument("--hard-ratio-max", type=float, help="curriculum ceiling R_max")
    p.add_argument("--eta", type=float, help="noise offset for hard patches")
    p.add_argument("--resume", type=Path, help="continue from a pre-training checkpoint")

    p = sub.add_parser("finetune", help="supervised fine-tuning from a pre-trained checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--frozen-encoder", action="store_true")

    p = sub.add_parser("evaluate", help="metrics of a fine-tuned checkpoint on labeled records")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="test")

    p = sub.add_parser("inspect-mask", help="dump masks, hard indices and attention-bias stats")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--hard-ratio-max", type=float)
    p.add_argument("--eta", type=float)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--skip-model", action="store_true", help="only check individual ops")
    return parser


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _restored_from(args) -> Path | None:
    if args.verb == "pretrain":
        return args.resume
    if args.verb == "inspect-mask":
        return args.checkpoint
    return None


# training defaults that differ per profile
TRAIN_PROFILES = {"paper": {"batch_size": 128}}


def resolve_config(args) -> tuple[ModelConfig, TrainConfig]:
    """profile (or restored checkpoint) < config file < --set overrides < verb flags."""
    model = ModelConfig.profile(args.profile).to_dict()
    train = TrainConfig(**TRAIN_PROFILES.get(args.profile, {})).to_dict()
    source = _restored_from(args)
    if source is not None:
        from .nn import checkpoint

        _, meta = checkpoint.load(source)
        if meta.get("kind") != "pretrain":
            raise IncompatibleCheckpoint(f"{source}: not a pre-training checkpoint")
        model, train = dict(meta["model"]), dict(meta["train"])
    sections = {"model": model, "train": train}
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        for section, values in loaded.items():
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in sections[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                sections[section][key] = value
    for item in args.overrides:
        key, sep, value = item.partition("=")
        section, _, field = key.partition(".")
        if not sep or section not in sections or field not in sections[section]:
            raise ConfigError(f"unknown override {item!r}")
        try:
            sections[section][field] = _coerce(value, sections[section][field])
        except ValueError as exc:
            raise ConfigError(f"bad value in {item!r}") from exc
    flag_map = {
        "seed": "seed", "steps": "total_steps", "mask_ratio": "r_rand",
        "hard_ratio_max": "r_max", "eta": "eta", "epochs": "finetune_epochs",
    }
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            train[field] = value
    if getattr(args, "frozen_encoder", False):
        train["frozen_encoder"] = True
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_effective(out: Path, mcfg: ModelConfig, tcfg: TrainConfig, verb: str) -> None:
    payload = {"verb": verb, "model": mcfg.to_dict(), "train": tcfg.to_dict()}
    (out / f"{verb}_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _pcap_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".pcap", ".cap"))
        if not files:
            raise FileNotFoundError(f"no .pcap files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(path)
    return [path]


def _load_dataset(data_dir: Path):
    from .trainer import FlowDataset

    records = read_records(data_dir / RECORDS_FILE)
    ids, feats = read_features_csv(data_dir / FEATURES_FILE)
    if ids != [r.flow_id for r in records]:
        raise ConfigError(f"{data_dir}: records and features are out of sync")
    return FlowDataset.from_records(records, feats)


def cmd_synth(args, out: Path) -> int:
    pcap, manifest = evalkit.synth_corpus(args.seed or 0, args.classes, args.flows, args.kind)
    (out / "corpus.pcap").write_bytes(pcap)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {manifest['n_flows']} flows to {out / 'corpus.pcap'}")
    return EXIT_OK


def _ingest(args):
    labels = None
    if getattr(args, "manifest", None) is not None:
        labels = evalkit.manifest_labels(json.loads(args.manifest.read_text()))
    all_flows, all_records = [], []
    stats = ParseStats()
    for path in _pcap_files(args.input):
        flows, records = preprocess_capture(path.read_bytes(), labels, stats)
        offset = len(all_records)
        for f, r in zip(flows, records):
            f.flow_id = r.flow_id = r.flow_id + offset
        all_flows += flows
        all_records += records
    return all_flows, all_records, stats


def cmd_preprocess(args, out: Path) -> int:
    flows, records, stats = _ingest(args)
    write_records(out / RECORDS_FILE, records)
    feats = np.stack([extract_features(f) for f in flows]) if flows else np.zeros((0, 27))
    write_features_csv(out / FEATURES_FILE, [r.flow_id for r in records], feats)
    summary = {"flows": len(records), "packets": stats.n_packets, "parsed": stats.n_parsed,
               "truncated": stats.n_truncated, "unsupported": stats.n_unsupported}
    (out / "preprocess.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(records)} flows, {stats.n_truncated} truncated, {stats.n_unsupported} unsupported packets")
    return EXIT_OK


def cmd_featurize(args, out: Path) -> int:
    flows, records, _ = _ingest(args)
    feats = np.stack([extract_features(f) for f in flows]) if flows else np.zeros((0, 27))
    write_features_csv(out / FEATURES_FILE, [r.flow_id for r in records], feats)
    return EXIT_OK


def cmd_pretrain(args, out: Path) -> int:
    from .trainer import Pretrainer

    mcfg, tcfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    _write_effective(out, mcfg, tcfg, "pretrain")
    if args.resume is not None:
        trainer = Pretrainer.restore(args.resume, dataset, tcfg)
    else:
        trainer = Pretrainer(dataset, mcfg, tcfg)
    rows = trainer.run(out)
    last = rows[-1]
    print(f"step {last['step']}: L_pre {last['L_pre']:.4f} L_rec {last['L_rec']:.4f}")
    return EXIT_OK


def cmd_finetune(args, out: Path) -> int:
    from .trainer import finetune, load_pretrained, save_classifier

    _, tcfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    if (dataset.labels < 0).any():
        raise LabelOutOfRange("fine-tuning needs labeled records")
    model = load_pretrained(args.checkpoint)
    _write_effective(out, model.cfg, tcfg, "finetune")
    res = finetune(dataset, model, tcfg)
    save_classifier(out / "finetune.ckpt", res.classifier, res.n_classes,
                    {"seed": tcfg.seed, "history": res.history})
    evalkit.write_metrics_csv(out / "finetune_metrics.csv", res.metrics)
    print(evalkit.format_metrics(res.metrics))
    return EXIT_OK


def cmd_evaluate(args, out: Path) -> int:
    from .nn import checkpoint
    from .trainer import evaluate, load_classifier, split_indices

    dataset = _load_dataset(args.data)
    clf, n_classes = load_classifier(args.checkpoint)
    _, meta = checkpoint.load(args.checkpoint)
    if dataset.labels.min() < 0 or dataset.labels.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    if args.split != "all":
        seed = args.seed if args.seed is not None else meta.get("seed", 0)
        parts = dict(zip(("train", "val", "test"), split_indices(dataset.labels, seed)))
        dataset = dataset.subset(parts[args.split])
    metrics = evaluate(clf, dataset, n_classes)
    evalkit.write_metrics_csv(out / "metrics.csv", metrics)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(evalkit.format_metrics(metrics))
    return EXIT_OK


def cmd_inspect_mask(args, out: Path) -> int:
    import torch

    from .trainer import Pretrainer

    mcfg, tcfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    trainer = (Pretrainer.restore(args.checkpoint, dataset, tcfg) if args.checkpoint
               else Pretrainer(dataset, mcfg, tcfg))
    idx, epoch = trainer.batch_indices(trainer.step)
    pairs, masks, r_hard = trainer.prepare(idx, epoch)
    with torch.no_grad():
        d = trainer.data
        trainer.model.eval()
        x_main = trainer.model.embed.embed_patches(torch.as_tensor(d.flow_bytes[idx]))
        m = torch.as_tensor(np.stack([mk.m for mk in masks]))
        x_mix = flowmix.mix(x_main, x_main[torch.as_tensor(pairs)], m)
        z = trainer.model.student_encode(flowmix.assemble_student_input(x_mix, trainer.model.embed))
        from .model import make_views

        v_main, _ = make_views(z[:, 1:], m, trainer.model.mask_token)
        z_stat = trainer.model.pmp.stat_context(
            torch.as_tensor(d.s_time[idx], dtype=torch.float32),
            torch.as_tensor(d.s_len[idx], dtype=torch.float32))
        b_attn = trainer.model.pmp.bias(z_stat, v_main)
    (out / "masks.txt").write_text(flowmix.mask_rows(masks))
    summary = {
        "step": trainer.step,
        "epoch": epoch,
        "r_hard": r_hard,
        "pairs": [int(p) for p in pairs],
        "samples": [int(i) for i in idx],
        "n_mask": [mk.n_mask for mk in masks],
        "hard_indices": [[int(h) for h in mk.hard_indices] for mk in masks],
        "b_attn": {"min": float(b_attn.min()), "max": float(b_attn.max()),
                   "mean": float(b_attn.mean()), "std": float(b_attn.std())},
    }
    (out / "mask_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary["b_attn"]))
    return EXIT_OK


def cmd_grad_check(args, out: Path) -> int:
    from .diagnostics import full_model_grad_check, op_grad_suite, teacher_grads_are_zero

    worst = op_grad_suite(range(args.seeds))
    ok = True
    for name, err in worst.items():
        flag = "ok" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"{name:<24} max rel err {err:.2e}  {flag}")
    if not args.skip_model:
        rep = full_model_grad_check(seed=args.seed or 0)
        ok &= rep.max_rel_err < 1e-4
        print(f"{'L_pre (tiny profile)':<24} max rel err {rep.max_rel_err:.2e} over {rep.n_coords} coords")
        zero = teacher_grads_are_zero(seed=args.seed or 0)
        ok &= zero
        print(f"{'teacher gradient':<24} {'zero' if zero else 'NONZERO'}")
    return EXIT_OK if ok else EXIT_NONFINITE


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "featurize": cmd_featurize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "inspect-mask": cmd_inspect_mask,
    "grad-check": cmd_grad_check,
}


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MMAE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.verb in ("pretrain", "finetune", "inspect-mask"):
            resolve_config(args)  # fail on bad config before touching the filesystem
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.verb](args, args.out)
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigError, IncompatibleCheckpoint, LabelOutOfRange) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MalformedCapture) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
