"""Tests for capture parsing, labels and flow assembly."""

import io
import struct

import dpkt
import pytest

from src.core.exceptions import MalformedCaptureError, UnsupportedLinkTypeError
from src.core.synthetic import pcap_bytes
from src.core.traffic import (
    PROTO_TCP,
    PROTO_UDP,
    CaptureFormat,
    Flow,
    FlowKey,
    LabeledDataset,
    TcpFlag,
    assemble_flows,
    label_flows,
    load_labels,
    packets_to_frame,
    parse_capture,
    subflow,
)
from tests.conftest import make_packet

HEADER = "ts_us,src_ip,dst_ip,src_port,dst_port,proto,len,flags\n"
SRC = bytes([10, 0, 0, 1])
DST = bytes([10, 0, 0, 2])


def csv_bytes(*rows: str) -> bytes:
    return (HEADER + "\n".join(rows) + "\n").encode()


def ethernet(ethertype: int, payload: bytes) -> bytes:
    return struct.pack("!6s6sH", b"\x02" * 6, b"\x04" * 6, ethertype) + payload


def syn_frame() -> bytes:
    """IPv4/TCP SYN of 60 bytes: 20-byte IP header, 20-byte TCP header, 20 option bytes."""
    options = (
        b"\x02\x04\x05\xb4"  # mss 1460
        b"\x04\x02"  # sack permitted
        b"\x08\x0a" + b"\x00" * 8  # timestamps
        + b"\x01"  # nop
        + b"\x03\x03\x07"  # window scale
    )
    tcp = struct.pack("!HHIIBBHHH", 40000, 443, 1000, 0, 10 << 4, 0x02, 65535, 0, 0) + options
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), 1, 0x4000, 64, PROTO_TCP, 0, SRC, DST)
    return ethernet(dpkt.ethernet.ETH_TYPE_IP, ip + tcp)


def udp_frame() -> bytes:
    payload = b"\x00" * 12
    udp = struct.pack("!HHHH", 5353, 53, 8 + len(payload), 0) + payload
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(udp), 2, 0, 64, PROTO_UDP, 0, SRC, DST)
    return ethernet(dpkt.ethernet.ETH_TYPE_IP, ip + udp)


def arp_frame() -> bytes:
    arp = struct.pack("!HHBBH6s4s6s4s", 1, 0x0800, 6, 4, 1, b"\x02" * 6, SRC, b"\x00" * 6, DST)
    return ethernet(dpkt.ethernet.ETH_TYPE_ARP, arp)


def pcap_file(*frames: bytes, order: str = "<", cut: int = 0) -> bytes:
    """Hand-built Ethernet pcap; ``cut`` drops bytes from the end of the last record."""
    out = struct.pack(order + "IHHiIII", dpkt.pcap.TCPDUMP_MAGIC, 2, 4, 0, 0, 65535, dpkt.pcap.DLT_EN10MB)
    for i, frame in enumerate(frames):
        out += struct.pack(order + "IIII", 100, i * 250, len(frame), len(frame)) + frame
    return out[: len(out) - cut]


class TestPacketCsv:
    """Test the packet CSV reader."""

    def test_parses_rows_and_normalizes_timestamps(self) -> None:
        """Timestamps are shifted so the earliest packet is at zero."""
        raw = csv_bytes(
            "1000,10.0.0.1,10.0.0.2,1234,80,6,60,SYN",
            "1500,10.0.0.1,10.0.0.2,1234,80,6,1500,ACK|PSH",
        )
        parsed = parse_capture(raw, CaptureFormat.CSV)

        assert parsed.skipped == 0
        assert [p.timestamp for p in parsed.packets] == [0, 500]
        assert parsed.packets[0].tcp_flags == frozenset({TcpFlag.SYN})
        assert parsed.packets[1].tcp_flags == frozenset({TcpFlag.ACK, TcpFlag.PSH})
        assert parsed.packets[1].length == 1500

    def test_skips_ipv6_and_other_protocols(self) -> None:
        """IPv6 rows and non-TCP/UDP protocols are counted as skipped."""
        raw = csv_bytes(
            "0,10.0.0.1,10.0.0.2,1234,80,6,60,",
            "1,::1,::2,1234,80,6,60,",
            "2,10.0.0.1,10.0.0.2,0,0,1,60,",
            "3,10.0.0.1,10.0.0.2,53,53,17,80,",
        )
        parsed = parse_capture(raw, "csv")

        assert parsed.skipped == 2
        assert [p.protocol for p in parsed.packets] == [PROTO_TCP, PROTO_UDP]

    def test_udp_flags_are_ignored(self) -> None:
        """Flags on a UDP row are dropped."""
        raw = csv_bytes("0,10.0.0.1,10.0.0.2,53,53,17,80,SYN")
        parsed = parse_capture(raw, CaptureFormat.CSV)
        assert parsed.packets[0].tcp_flags == frozenset()

    def test_unknown_flag_raises(self) -> None:
        """An untracked flag name is a malformed capture."""
        raw = csv_bytes("0,10.0.0.1,10.0.0.2,1234,80,6,60,URG")
        with pytest.raises(MalformedCaptureError, match="unknown TCP flag"):
            parse_capture(raw, CaptureFormat.CSV)

    def test_missing_column_raises(self) -> None:
        """A CSV without the packet columns is rejected."""
        raw = b"ts_us,src_ip\n0,10.0.0.1\n"
        with pytest.raises(MalformedCaptureError, match="lacks columns"):
            parse_capture(raw, CaptureFormat.CSV)

    def test_non_positive_length_raises(self) -> None:
        """A zero packet length is rejected."""
        raw = csv_bytes("0,10.0.0.1,10.0.0.2,1234,80,6,0,")
        with pytest.raises(MalformedCaptureError):
            parse_capture(raw, CaptureFormat.CSV)

    def test_empty_input_gives_no_packets(self) -> None:
        """An empty file parses to nothing."""
        parsed = parse_capture(b"", CaptureFormat.CSV)
        assert parsed.packets == []
        assert parsed.skipped == 0

    def test_frame_matches_csv_layout(self) -> None:
        """Written frames use the reader's columns and sorted flag names."""
        packets = [make_packet(7, 60, flags=frozenset({TcpFlag.FIN, TcpFlag.ACK}))]
        frame = packets_to_frame(packets)
        assert list(frame.columns) == HEADER.strip().split(",")
        assert frame.loc[0, "flags"] == "ACK|FIN"


class TestPcap:
    """Test the pcap reader."""

    def test_reads_written_trace(self) -> None:
        """A generated trace reads back with its timestamps, lengths and flags."""
        packets = [
            make_packet(1_000_000, 60, flags=frozenset({TcpFlag.SYN})),
            make_packet(1_002_500, 1500, flags=frozenset({TcpFlag.ACK, TcpFlag.PSH})),
            make_packet(1_004_000, 80, src_port=53, dst_port=53, protocol=PROTO_UDP),
        ]
        parsed = parse_capture(pcap_bytes(packets), CaptureFormat.PCAP)

        assert parsed.skipped == 0
        assert [p.timestamp for p in parsed.packets] == [0, 2500, 4000]
        assert [p.length for p in parsed.packets] == [60, 1500, 80]
        assert parsed.packets[1].tcp_flags == frozenset({TcpFlag.ACK, TcpFlag.PSH})
        assert parsed.packets[2].protocol == PROTO_UDP
        assert parsed.packets[0].key == packets[0].key

    def test_hand_built_syn(self) -> None:
        """A 60-byte SYN decodes field by field."""
        parsed = parse_capture(pcap_file(syn_frame()), CaptureFormat.PCAP)

        assert parsed.skipped == 0
        [packet] = parsed.packets
        assert packet.key == FlowKey("10.0.0.1", "10.0.0.2", 40000, 443, PROTO_TCP)
        assert packet.length == 60
        assert packet.tcp_flags == frozenset({TcpFlag.SYN})
        assert packet.timestamp == 0

    def test_arp_is_skipped(self) -> None:
        """An ARP frame is skipped and counted next to a UDP packet."""
        parsed = parse_capture(pcap_file(arp_frame(), udp_frame()), CaptureFormat.PCAP)

        assert parsed.skipped == 1
        assert len(parsed.packets) == 1
        assert parsed.packets[0].protocol == PROTO_UDP
        assert (parsed.packets[0].src_port, parsed.packets[0].dst_port) == (5353, 53)

    def test_big_endian_file(self) -> None:
        """A big-endian capture reads like a little-endian one."""
        little = parse_capture(pcap_file(syn_frame(), udp_frame()), CaptureFormat.PCAP)
        big = parse_capture(pcap_file(syn_frame(), udp_frame(), order=">"), CaptureFormat.PCAP)

        assert big.packets == little.packets
        assert [p.timestamp for p in big.packets] == [0, 250]

    def test_truncated_record_body(self) -> None:
        """A record shorter than its captured length is reported with its offset."""
        raw = pcap_file(syn_frame(), cut=3)
        with pytest.raises(MalformedCaptureError, match="Record 1 at offset 24"):
            parse_capture(raw, CaptureFormat.PCAP)

    def test_truncated_record_header(self) -> None:
        """A partial record header after a full record is malformed."""
        raw = pcap_file(udp_frame()) + b"\x00" * 8
        with pytest.raises(MalformedCaptureError, match="after record 1"):
            parse_capture(raw, CaptureFormat.PCAP)

    def test_non_ethernet_link_type(self) -> None:
        """Captures on another link type are refused."""
        buf = io.BytesIO()
        dpkt.pcap.Writer(buf, linktype=dpkt.pcap.DLT_NULL)
        with pytest.raises(UnsupportedLinkTypeError) as exc:
            parse_capture(buf.getvalue(), CaptureFormat.PCAP)
        assert exc.value.link_type == dpkt.pcap.DLT_NULL

    def test_garbage_header(self) -> None:
        """A global header without a pcap magic is malformed."""
        with pytest.raises(MalformedCaptureError):
            parse_capture(b"\x00" * 24, CaptureFormat.PCAP)

    def test_truncated_header(self) -> None:
        """A file shorter than the global header is malformed."""
        with pytest.raises(MalformedCaptureError):
            parse_capture(b"abc", CaptureFormat.PCAP)


class TestLabels:
    """Test the label CSV reader."""

    def test_load_labels(self) -> None:
        """One label row maps its 5-tuple to the label."""
        raw = b"src_ip,dst_ip,src_port,dst_port,proto,label\n10.0.0.1,10.0.0.2,1234,80,6,web\n"
        labels = load_labels(raw)
        assert labels == {FlowKey("10.0.0.1", "10.0.0.2", 1234, 80, 6): "web"}

    def test_bad_port(self) -> None:
        """A non-numeric port names the label row."""
        raw = b"src_ip,dst_ip,src_port,dst_port,proto,label\n10.0.0.1,10.0.0.2,x,80,6,web\n"
        with pytest.raises(MalformedCaptureError, match="Label row 2"):
            load_labels(raw)


class TestFlows:
    """Test flow assembly and labeling."""

    def test_assemble_keeps_order(self) -> None:
        """Flows appear in first-packet order and keep packet order."""
        a1 = make_packet(0, src_port=1)
        b1 = make_packet(1, src_port=2)
        a2 = make_packet(2, src_port=1)
        flows = assemble_flows([a1, b1, a2])

        assert [f.key.src_port for f in flows] == [1, 2]
        assert flows[0].packets == [a1, a2]

    def test_directions_are_separate_flows(self) -> None:
        """The two directions of a connection are two flows."""
        forward = make_packet(0)
        backward = make_packet(1, src_ip="10.0.0.2", dst_ip="10.0.0.1", src_port=80, dst_port=1234)
        assert len(assemble_flows([forward, backward])) == 2

    def test_label_flows_drops_unlabeled(self) -> None:
        """Flows without a label are left out."""
        flows = assemble_flows([make_packet(0, src_port=1), make_packet(1, src_port=2)])
        dataset = label_flows(flows, {flows[1].key: "b"})

        assert [f.key.src_port for f in dataset.flows] == [2]
        assert dataset.classes == ["b"]

    def test_dataset_rejects_unknown_label(self) -> None:
        """A flow label outside the classes is rejected."""
        flow = Flow(make_packet(0).key, [make_packet(0)], "x")
        with pytest.raises(ValueError):
            LabeledDataset([flow], ["y"])

    def test_subflow(self) -> None:
        """Prefixes are truncated only when the flow is longer."""
        flow = Flow(make_packet(0).key, [make_packet(t) for t in range(3)])
        assert subflow(flow, 2).truncated
        assert len(subflow(flow, 2)) == 2
        short = subflow(flow, 5)
        assert not short.truncated
        assert len(short) == 3

    def test_key_bytes(self) -> None:
        """Flow keys pack into 13 bytes and print as addr:port pairs."""
        key = FlowKey("10.0.0.1", "10.0.0.2", 1234, 80, 6)
        assert len(key.to_bytes()) == 13
        assert str(key) == "10.0.0.1:1234-10.0.0.2:80/6"
