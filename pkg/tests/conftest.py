import struct

import pytest

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.append((number, name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")


def pcap(frames, linktype=1, endian="<", nsec=False):
    """Classic PCAP from (timestamp_seconds, frame_bytes) pairs."""
    magic = 0xA1B23C4D if nsec else 0xA1B2C3D4
    scale = 1_000_000_000 if nsec else 1_000_000
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)]
    for ts, frame in frames:
        ticks = round(ts * scale)
        out.append(struct.pack(endian + "IIII", ticks // scale, ticks % scale, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)


def ipv4(src, dst, proto, body, ident=0):
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(body), ident, 0x4000, 64, proto, 0xBEEF,
                      bytes(int(x) for x in src.split(".")), bytes(int(x) for x in dst.split(".")))
    return hdr + body


def tcp(sport, dport, flags=0x18, payload=b"", seq=1, ack=1):
    return struct.pack("!HHIIBBHHH", sport, dport, seq, ack, 5 << 4, flags, 65535, 0xCAFE, 0) + payload


def udp(sport, dport, payload=b""):
    return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0xABCD) + payload


ETH = bytes.fromhex("020000000002020000000001") + b"\x08\x00"


def eth(ip_bytes):
    return ETH + ip_bytes


@pytest.fixture(scope="session")
def small_corpus():
    """(records, flows, features, manifest) for 4 classes x 12 flows."""
    import numpy as np

    from mmae.evalkit import manifest_labels, synth_corpus
    from mmae.ingest import preprocess_capture
    from mmae.side_channel import extract_features

    data, manifest = synth_corpus(3, 4, 12)
    flows, records = preprocess_capture(data, manifest_labels(manifest))
    feats = np.stack([extract_features(f) for f in flows])
    return records, flows, feats, manifest


@pytest.fixture()
def small_dataset(small_corpus):
    from mmae.trainer import FlowDataset

    records, _, feats, _ = small_corpus
    return FlowDataset.from_records(records, feats)
