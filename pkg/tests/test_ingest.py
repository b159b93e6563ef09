import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import eth, ipv4, pcap, tcp, udp
from mmae.evalkit import synth_corpus
from mmae.ingest import (
    FLOW_BYTES, Direction, MalformedCapture, ParseStats, RawFlow, RawPacket, anonymize,
    normalize_flow, parse_ip_packet, preprocess_capture, read_pcap, read_records, segment_flows,
    write_records,
)

A, B = "10.0.0.1", "10.0.0.2"


def test_three_packets_one_flow():
    frames = [(t, eth(ipv4(A, B, 6, tcp(5000, 443)))) for t in (1.0, 1.5, 2.0)]
    flows = segment_flows(pcap(frames))
    assert len(flows) == 1
    assert len(flows[0].packets) == 3


def test_bidirectional_packets_join_one_flow():
    frames = [
        (1.0, eth(ipv4(A, B, 6, tcp(5000, 443)))),
        (1.1, eth(ipv4(B, A, 6, tcp(443, 5000)))),
        (1.2, eth(ipv4(A, B, 6, tcp(5000, 443)))),
        (1.3, eth(ipv4(B, A, 6, tcp(443, 5000)))),
    ]
    (flow,) = segment_flows(pcap(frames))
    dirs = [p.direction for p in flow.packets]
    assert dirs == [Direction.UPLINK, Direction.DOWNLINK, Direction.UPLINK, Direction.DOWNLINK]


def test_two_sessions_of_five():
    frames = []
    for k in range(5):
        frames.append((1.0 + k, eth(ipv4(A, B, 6, tcp(5000, 443, payload=b"x" * k)))))
        frames.append((1.5 + k, eth(ipv4("10.0.0.3", B, 17, udp(6000, 53, b"q")))))
    flows = segment_flows(pcap(frames))
    assert [len(f.packets) for f in flows] == [5, 5]


def test_timestamp_ties_keep_capture_order():
    frames = [(1.0, eth(ipv4(A, B, 6, tcp(5000, 443, payload=bytes([k]))))) for k in range(4)]
    (flow,) = segment_flows(pcap(frames))
    assert [p.link_payload[-1] for p in flow.packets] == [0, 1, 2, 3]


def test_out_of_order_timestamps_sorted():
    frames = [(2.0, eth(ipv4(A, B, 17, udp(1, 2, b"b")))), (1.0, eth(ipv4(A, B, 17, udp(1, 2, b"a"))))]
    (flow,) = segment_flows(pcap(frames))
    assert [p.timestamp for p in flow.packets] == [1.0, 2.0]


def test_bad_magic_is_fatal():
    with pytest.raises(MalformedCapture):
        read_pcap(b"\x00" * 24)
    with pytest.raises(MalformedCapture):
        read_pcap(b"short")


def test_big_endian_and_nanosecond_captures():
    frames = [(1.25, eth(ipv4(A, B, 17, udp(1, 2, b"abc"))))]
    for endian, nsec in ((">", False), ("<", True), (">", True)):
        (pkt,) = read_pcap(pcap(frames, endian=endian, nsec=nsec))
        assert pkt.timestamp == pytest.approx(1.25)
        assert pkt.payload_len == 3


def test_truncated_packet_counted_not_fatal():
    good = eth(ipv4(A, B, 17, udp(1, 2, b"abc")))
    data = pcap([(1.0, good), (2.0, good)])
    stats = ParseStats()
    flows = segment_flows(data[:-5], stats)
    assert stats.n_truncated == 1
    assert len(flows) == 1 and len(flows[0].packets) == 1


def test_snapped_ip_header_counted_as_truncated():
    frame = eth(ipv4(A, B, 6, tcp(1, 2)))[:14 + 30]  # TCP header cut short
    stats = ParseStats()
    assert segment_flows(pcap([(1.0, frame)]), stats) == []
    assert stats.n_truncated == 1


def test_unsupported_link_and_ethertype_skipped():
    arp = bytes(12) + b"\x08\x06" + bytes(28)
    stats = ParseStats()
    flows = segment_flows(pcap([(1.0, arp), (1.1, eth(ipv4(A, B, 17, udp(1, 2))))]), stats)
    assert stats.n_unsupported == 1 and len(flows) == 1
    stats = ParseStats()
    assert segment_flows(pcap([(1.0, b"\x00" * 40)], linktype=147), stats) == []
    assert stats.n_unsupported == 1


def test_raw_ip_sll_null_and_vlan_links():
    ip = ipv4(A, B, 17, udp(1, 2, b"zz"))
    sll = bytes(14) + b"\x08\x00" + ip
    null = struct.pack("<I", 2) + ip
    vlan = bytes(12) + b"\x81\x00\x00\x05\x08\x00" + ip
    for frame, lt in ((ip, 101), (sll, 113), (null, 0), (vlan, 1)):
        (pkt,) = read_pcap(pcap([(1.0, frame)], linktype=lt))
        assert pkt.link_payload == ip
        assert pkt.payload_len == 2


def test_ipv6_udp():
    body = udp(1000, 2000, b"hello")
    ip6 = (struct.pack("!IHBB", 6 << 28, len(body), 17, 64)
           + bytes(15) + b"\x01" + bytes(15) + b"\x02" + body)
    pkt = parse_ip_packet(0.0, ip6)
    assert pkt.five_tuple[2:] == (1000, 2000, 17)
    assert pkt.header_len == 48 and pkt.payload_len == 5


def _tcp_packet_60():
    ip = ipv4("10.1.2.3", "172.16.0.9", 6, tcp(1234, 443, payload=bytes(range(20))))
    assert len(ip) == 60
    return parse_ip_packet(0.0, ip)


def test_anonymize_zeroes_addresses_and_ports_only():
    pkt = _tcp_packet_60()
    out = anonymize(pkt).link_payload
    raw = pkt.link_payload
    assert out[12:20] == bytes(8)
    assert out[20:24] == bytes(4)
    changed = [i for i in range(60) if out[i] != raw[i]]
    assert set(changed) <= set(range(12, 24))
    assert out[10:12] == raw[10:12]            # IP checksum untouched
    assert out[36:38] == raw[36:38]            # TCP checksum untouched
    assert out[40:] == raw[40:]


def test_anonymize_idempotent_and_keeps_length():
    pkt = _tcp_packet_60()
    once = anonymize(pkt)
    assert anonymize(once) == once
    assert len(once.link_payload) == len(pkt.link_payload)
    assert once.payload_len == pkt.payload_len
    assert once.five_tuple == pkt.five_tuple


def test_anonymize_non_ip_unchanged():
    pkt = RawPacket(0.0, b"\x00\x01\x02", ("", "", 0, 0, 0), 0, 3, 3)
    assert anonymize(pkt) == pkt


def _flow(pkts):
    return RawFlow(0, pkts, ("a", "b", 1, 2, 6))


def test_normalize_single_packet_padding():
    pkt = parse_ip_packet(0.0, ipv4(A, B, 6, tcp(1, 2, payload=bytes([200] * 10))))
    rec = normalize_flow(_flow([pkt]))
    raw = np.frombuffer(pkt.link_payload, dtype=np.uint8)
    assert rec.bytes.shape == (FLOW_BYTES,)
    np.testing.assert_array_equal(rec.bytes[:40], (raw[:40] / 255.0).astype(np.float32))
    assert (rec.bytes[40:80] == 0).all()
    np.testing.assert_array_equal(rec.bytes[80:90], np.float32(200 / 255.0))
    assert (rec.bytes[90:] == 0).all()
    assert list(rec.pkt_payload_len) == [10, 0, 0, 0, 0]


def test_normalize_all_ff_is_one():
    pkt = RawPacket(0.0, b"\xff" * 400, ("a", "b", 1, 2, 6), header_len=80, payload_len=320,
                    total_len=400)
    rec = normalize_flow(_flow([pkt]))
    assert (rec.bytes[:320] == 1.0).all()
    assert (rec.bytes[320:] == 0.0).all()


def test_normalize_takes_first_five_packets():
    pkts = [parse_ip_packet(0.5 * k, ipv4(A, B, 17, udp(1, 2, bytes([k + 1]) * 3))) for k in range(7)]
    rec = normalize_flow(_flow(pkts))
    assert rec.pkt_inter_arrival[0] == 0
    np.testing.assert_allclose(rec.pkt_inter_arrival, [0, 0.5, 0.5, 0.5, 0.5])
    # fifth packet's payload byte is 5, the sixth's never appears
    assert rec.bytes[4 * 320 + 80] == np.float32(5 / 255)
    assert not np.isclose(rec.bytes, 6 / 255).any()


def test_header_longer_than_80_truncated_independently():
    pkt = RawPacket(0.0, b"\x01" * 100 + b"\x02" * 10, ("a", "b", 1, 2, 6), header_len=100,
                    payload_len=10, total_len=110)
    seg = normalize_flow(_flow([pkt])).bytes[:320] * 255
    assert (np.round(seg[:80]) == 1).all()
    assert (np.round(seg[80:90]) == 2).all() and (seg[90:] == 0).all()


def test_record_file_round_trip(tmp_path, small_corpus):
    records = small_corpus[0]
    write_records(tmp_path / "r.bin", records)
    back = read_records(tmp_path / "r.bin")
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert a.flow_id == b.flow_id and a.label == b.label
        np.testing.assert_array_equal(a.bytes, b.bytes)
        np.testing.assert_array_equal(a.pkt_payload_len, b.pkt_payload_len)
        np.testing.assert_allclose(a.pkt_inter_arrival, b.pkt_inter_arrival, rtol=1e-6)


def test_records_in_unit_interval_and_deterministic(small_corpus):
    records, flows = small_corpus[0], small_corpus[1]
    for rec in records:
        assert rec.bytes.shape == (FLOW_BYTES,)
        assert rec.bytes.min() >= 0 and rec.bytes.max() <= 1
    again = normalize_flow(flows[0])
    np.testing.assert_array_equal(again.bytes, normalize_flow(flows[0]).bytes)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_classes=st.integers(1, 4), per_class=st.integers(1, 5))
def test_synth_manifest_recovered(seed, n_classes, per_class):
    data, manifest = synth_corpus(seed, n_classes, per_class)
    stats = ParseStats()
    flows = segment_flows(data, stats)
    assert stats.n_truncated == stats.n_unsupported == 0
    assert len(flows) == manifest["n_flows"]
    by_tuple = {f.five_tuple: len(f.packets) for f in flows}
    _, labels_records = preprocess_capture(data)
    assert len(labels_records) == len(flows)
    from mmae.ingest import canonical_five_tuple

    for entry in manifest["flows"]:
        assert by_tuple[canonical_five_tuple(*entry["five_tuple"])] == entry["n_packets"]
