"""Flow-level side-channel statistics and per-packet signals."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ingest import AppProto, Direction, FlowRecord, RawFlow

TIME_FEATURES = ["F-Duration", "F-Time", "P-inter-min", "P-inter-max", "P-inter-avg", "P-inter-std"]
SIZE_FEATURES = [
    "P-total", "Downlink-Bytes", "Downlink-Count", "Payload-P-Count", "Payload-P-min",
    "Payload-P-max", "Payload-P-std", "P-Length-min", "P-Length-max", "P-Length-avg",
    "P-Length-std",
]
FLAG_FEATURES = [
    "TCP Count", "UDP Count", "DNS Count", "ICMP Count", "SYN Count", "FIN Count",
    "ACK Count", "PSH Count", "URG Count", "RST Count",
]
FEATURE_NAMES = TIME_FEATURES + SIZE_FEATURES + FLAG_FEATURES
N_FEATURES = len(FEATURE_NAMES)

_PROTO_TCP, _PROTO_UDP = 6, 17


@dataclass
class PacketSignals:
    s_time: np.ndarray
    s_len: np.ndarray


def _stats(x: np.ndarray) -> tuple[float, float, float, float]:
    # population std; empty input gives zeros
    if x.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    return float(x.min()), float(x.max()), float(x.mean()), float(x.std())


def extract_features(flow: RawFlow) -> np.ndarray:
    """The 27 side-channel features of a whole flow, in ``FEATURE_NAMES`` order.

    F-Time is relative to the capture start. Payload min/max/std are taken
    over packets that carry payload.
    """
    pkts = flow.packets
    if not pkts:
        raise ValueError("empty flow")
    ts = np.array([p.timestamp for p in pkts], dtype=np.float64)
    gaps = np.diff(ts)
    i_min, i_max, i_avg, i_std = _stats(gaps)
    time = [ts[-1] - ts[0], ts[0] - flow.capture_start, i_min, i_max, i_avg, i_std]

    total = np.array([p.total_len for p in pkts], dtype=np.float64)
    payload = np.array([p.payload_len for p in pkts], dtype=np.float64)
    down = np.array([p.direction == Direction.DOWNLINK for p in pkts])
    p_min, p_max, _, p_std = _stats(payload[payload > 0])
    l_min, l_max, l_avg, l_std = _stats(total)
    size = [
        len(pkts), total[down].sum(), down.sum(), (payload > 0).sum(),
        p_min, p_max, p_std, l_min, l_max, l_avg, l_std,
    ]

    protos = [p.five_tuple[4] for p in pkts]
    flags = [
        sum(pr == _PROTO_TCP for pr in protos),
        sum(pr == _PROTO_UDP for pr in protos),
        sum(p.app_proto_hint == AppProto.DNS for p in pkts),
        sum(p.app_proto_hint == AppProto.ICMP for p in pkts),
    ]
    flags += [sum(name in p.tcp_flags for p in pkts) for name in ("SYN", "FIN", "ACK", "PSH", "URG", "RST")]
    return np.array(time + size + flags, dtype=np.float64)


def packet_signals(rec: FlowRecord) -> PacketSignals:
    return PacketSignals(
        s_time=np.asarray(rec.pkt_inter_arrival, dtype=np.float64).copy(),
        s_len=np.asarray(rec.pkt_payload_len, dtype=np.float64).copy(),
    )


def write_features_csv(path, flow_ids, features: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flow_id"] + FEATURE_NAMES)
        for fid, row in zip(flow_ids, features):
            w.writerow([fid] + [repr(float(v)) for v in row])


def read_features_csv(path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[1:] != FEATURE_NAMES:
            raise ValueError(f"{path}: unexpected feature columns")
        ids, rows = [], []
        for line in r:
            ids.append(int(line[0]))
            rows.append([float(v) for v in line[1:]])
    return ids, np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES)
