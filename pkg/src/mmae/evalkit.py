"""Classification metrics and a deterministic synthetic traffic corpus."""

from __future__ import annotations

import csv
import struct

import numpy as np

from .ingest import canonical_five_tuple


class EmptyMatrix(ValueError):
    pass


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _per_class(cm):
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return precision, recall, f1, true / total, tp.sum() / total


def weighted_f1(cm) -> float:
    _, _, f1, weight, _ = _per_class(cm)
    return float((weight * f1).sum())


def basic_metrics(cm) -> dict:
    """Accuracy plus macro and support-weighted precision/recall/F1.

    Classes with a zero denominator contribute 0.
    """
    precision, recall, f1, weight, acc = _per_class(cm)
    return {
        "accuracy": float(acc),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "weighted_precision": float((weight * precision).sum()),
        "weighted_recall": float((weight * recall).sum()),
        "weighted_f1": float((weight * f1).sum()),
    }


def write_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v))])


def format_metrics(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    return "\n".join(f"{k:<{width}}  {v:.4f}" for k, v in metrics.items())


# --- synthetic corpus ------------------------------------------------------

PROFILES = ("separable", "overlapping")


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _ipv4(src: str, dst: str, proto: int, body: bytes, ident: int, ttl: int = 64) -> bytes:
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(body), ident & 0xFFFF, 0x4000, ttl, proto, 0,
                      bytes(int(x) for x in src.split(".")), bytes(int(x) for x in dst.split(".")))
    hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
    return hdr + body


def _tcp(sport, dport, seq, ack, flags: int, payload: bytes) -> bytes:
    return struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                       5 << 4, flags, 65535, 0, 0) + payload


def _udp(sport, dport, payload: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload


_ETH = bytes.fromhex("020000000002" "020000000001" "0800")
_FIN, _SYN, _RST, _PSH, _ACK = 0x01, 0x02, 0x04, 0x08, 0x10


def class_template(c: int, n_classes: int, profile: str) -> dict:
    """Per-class traffic law; deterministic in (c, n_classes, profile)."""
    udp = c % 3 == 2
    return {
        "proto": 17 if udp else 6,
        "server_port": 53 if (udp and c % 6 == 5) else (8000 + c if udp else 443),
        "n_packets": (3 + c % 4, 7 + c % 4),
        "payload_mean": 80.0 + (c * 157) % 900,
        "payload_sd": 20.0,
        "byte_center": int((c + 0.5) * 256 / n_classes) % 256,
        "byte_width": max(8, 128 // n_classes) if profile == "separable" else 96,
        "byte_noise": 0.0 if profile == "separable" else 0.5,
        "rate_hz": 20.0 * (c + 1),
        "p_down": 0.3 + 0.4 * ((c * 7) % 5) / 4,
        "psh": c % 2 == 0,
        "fin": c % 4 in (0, 3),
    }


def synth_corpus(seed: int, n_classes: int, flows_per_class: int,
                 profile: str = "separable") -> tuple[bytes, dict]:
    """Classic-PCAP corpus of labeled sessions plus its manifest.

    Classes differ in payload byte histograms, payload length, inter-arrival
    rate, direction mix and TCP flag pattern; ``overlapping`` blends each
    class's byte law with a shared uniform one.
    """
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    rng = np.random.default_rng(seed)
    packets = []
    flows = []
    order = [(c, i) for c in range(n_classes) for i in range(flows_per_class)]
    rng.shuffle(order)
    for f_idx, (c, _) in enumerate(order):
        tpl = class_template(c, n_classes, profile)
        client = f"10.{c + 1}.{f_idx // 250}.{f_idx % 250 + 1}"
        server = f"192.168.100.{c + 1}"
        cport = 20000 + f_idx
        sport = tpl["server_port"]
        lo, hi = tpl["n_packets"]
        n_pk = int(rng.integers(lo, hi + 1))
        t_us = 1_000_000 + f_idx * 20_000 + int(rng.integers(0, 10_000))
        lens, flags_seen = [], []
        seq_c, seq_s = int(rng.integers(0, 2**31)), int(rng.integers(0, 2**31))
        for k in range(n_pk):
            if k > 0:
                t_us += 1 + int(rng.exponential(1e6 / tpl["rate_hz"]))
            down = k == 1 or (k > 1 and rng.random() < tpl["p_down"])
            if tpl["proto"] == 6 and k == 0:
                plen = 0
            else:
                plen = int(np.clip(rng.normal(tpl["payload_mean"], tpl["payload_sd"]), 1, 1400))
            body = (tpl["byte_center"] + rng.integers(-tpl["byte_width"] // 2, tpl["byte_width"] // 2,
                                                      size=plen)) % 256
            if tpl["byte_noise"]:
                noisy = rng.random(plen) < tpl["byte_noise"]
                body[noisy] = rng.integers(0, 256, size=int(noisy.sum()))
            payload = body.astype(np.uint8).tobytes()
            src, dst, sp, dp = (server, client, sport, cport) if down else (client, server, cport, sport)
            if tpl["proto"] == 6:
                if k == 0:
                    fl = _SYN
                elif k == 1:
                    fl = _SYN | _ACK
                elif k == n_pk - 1 and tpl["fin"]:
                    fl = _FIN | _ACK
                else:
                    fl = (_PSH | _ACK) if tpl["psh"] else _ACK
                seq, ack = (seq_s, seq_c) if down else (seq_c, seq_s)
                l4 = _tcp(sp, dp, seq, ack, fl, payload)
                if down:
                    seq_s += plen
                else:
                    seq_c += plen
                flags_seen.append(fl)
            else:
                l4 = _udp(sp, dp, payload)
            frame = _ETH + _ipv4(src, dst, tpl["proto"], l4, ident=f_idx * 64 + k)
            packets.append((t_us, f_idx, k, frame))
            lens.append(plen)
        flows.append({
            "index": f_idx,
            "label": c,
            "n_packets": n_pk,
            "five_tuple": [client, server, cport, sport, tpl["proto"]],
            "payload_lens": lens,
            "tcp_flags": flags_seen,
        })

    packets.sort(key=lambda p: (p[0], p[1], p[2]))
    out = [struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)]
    for t_us, _, _, frame in packets:
        out.append(struct.pack("<IIII", t_us // 1_000_000, t_us % 1_000_000, len(frame), len(frame)))
        out.append(frame)
    manifest = {
        "seed": seed,
        "n_classes": n_classes,
        "flows_per_class": flows_per_class,
        "profile": profile,
        "n_flows": len(flows),
        "flows": flows,
    }
    return b"".join(out), manifest


def manifest_labels(manifest: dict) -> dict:
    """Canonical five-tuple -> class label."""
    return {canonical_five_tuple(*f["five_tuple"]): f["label"] for f in manifest["flows"]}
