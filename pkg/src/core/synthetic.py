"""Synthetic datasets with known structure for experiments and tests."""

from __future__ import annotations

import io
import ipaddress
import logging
from pathlib import Path

import dpkt
import numpy as np

from src.core.context_trainer import ContextDataset
from src.core.features import (
    ALL_FEATURES,
    DEFINED_FROM,
    FeatureId,
    FeatureMatrix,
)
from src.core.traffic import (
    PROTO_TCP,
    PROTO_UDP,
    FlowKey,
    PacketRecord,
    TcpFlag,
    labels_to_frame,
    packets_to_frame,
)

logger = logging.getLogger(__name__)

PHASE_CLASSES = ["class_0", "class_1"]

# Packet-count blocks sharing one draw, and the features that carry the label there
PHASES: list[tuple[tuple[int, ...], tuple[FeatureId, FeatureId]]] = [
    ((1, 2, 3, 4), (FeatureId.LEN_MIN, FeatureId.LEN_MAX)),
    ((5, 6), (FeatureId.LEN_AVG, FeatureId.LEN_TOTAL)),
    ((7,), (FeatureId.LEN_MIN, FeatureId.LEN_MAX)),
    ((8,), (FeatureId.DURATION, FeatureId.SRC_PORT)),
    ((9,), (FeatureId.DST_PORT, FeatureId.CUR_LEN)),
]

# Independent of the label in every context
NOISE_FEATURES = (
    FeatureId.SYN_COUNT,
    FeatureId.ACK_COUNT,
    FeatureId.PSH_COUNT,
    FeatureId.FIN_COUNT,
)

TRACE_CLASSES = ["bulk", "interactive"]
_TRACE_PROFILES = {
    # class: (mean length, length sd, mean IAT in µs)
    "interactive": (300.0, 40.0, 2_000.0),
    "bulk": (1200.0, 60.0, 20_000.0),
}


def _informative(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = np.where(labels == 1, 160.0, 100.0)
    return np.clip(np.round(rng.normal(means, 15.0)), 0, None)


def phase_dataset(n_samples: int = 600, seed: int = 0) -> ContextDataset:
    """Nine contexts whose label-carrying features change with the packet count.

    Packets 1-4 carry the label in ``len_min``/``len_max``, 5-6 in
    ``len_avg``/``len_total``, 7 in ``len_min``/``len_max`` again, 8 in
    ``duration``/``src_port`` and 9 in ``dst_port``/``cur_len``. Every other
    feature is drawn independently of the label; the four flag counters are
    uniform noise. The completed-flow matrix equals context 9.
    """
    if n_samples < 4:
        raise ValueError(f"Need at least 4 samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    y = np.arange(n_samples) % 2
    rng.shuffle(y)
    labels = np.array([PHASE_CLASSES[v] for v in y], dtype=object)
    flow_ids = [f"flow-{i:05d}" for i in range(n_samples)]
    column = {f: i for i, f in enumerate(ALL_FEATURES)}

    contexts: dict[int, FeatureMatrix] = {}
    for counts, informative in PHASES:
        X = np.clip(np.round(rng.normal(130.0, 30.0, (n_samples, len(ALL_FEATURES)))), 0, None)
        for f in NOISE_FEATURES:
            X[:, column[f]] = rng.integers(0, 128, n_samples)
        for f in informative:
            X[:, column[f]] = _informative(y, rng)
        for p in counts:
            Xp = X.copy()
            Xp[:, column[FeatureId.PKT_COUNT]] = p
            for f, first in DEFINED_FROM.items():
                if p < first:
                    Xp[:, column[f]] = np.nan
            contexts[p] = FeatureMatrix(Xp, list(ALL_FEATURES), labels.copy(), list(flow_ids))
    logger.info(f"Generated {len(contexts)} phase contexts with {n_samples} flows")
    return ContextDataset.from_matrices(contexts, contexts[max(contexts)])


def two_class_trace(
    n_flows: int = 5000,
    seed: int = 0,
    min_packets: int = 5,
    max_packets: int = 20,
) -> tuple[list[PacketRecord], dict[FlowKey, str]]:
    """TCP trace of interactive (small, fast) and bulk (large, slow) flows.

    Each flow has a distinct source address and opens with a SYN. The
    earliest packet is at time 0 and packets are time-ordered.
    """
    if n_flows < 1:
        raise ValueError(f"Need at least one flow, got {n_flows}")
    if not 1 <= min_packets <= max_packets:
        raise ValueError("Packet range must satisfy 1 <= min_packets <= max_packets")
    rng = np.random.default_rng(seed)
    starts = rng.uniform(0, 5_000_000, n_flows)
    starts -= starts.min()

    rows: list[tuple[int, int, int, PacketRecord]] = []
    labels: dict[FlowKey, str] = {}
    for i in range(n_flows):
        label = TRACE_CLASSES[i % 2]
        mean_len, sd_len, mean_iat = _TRACE_PROFILES[label]
        n = int(rng.integers(min_packets, max_packets + 1))
        iats = rng.exponential(mean_iat, n)
        iats[0] = 0.0
        times = np.round(starts[i] + np.cumsum(iats)).astype(np.int64)
        lengths = np.clip(np.round(rng.normal(mean_len, sd_len, n)), 40, 1500).astype(int)
        src = str(ipaddress.IPv4Address(0x0A000000 + i + 1))
        key = FlowKey(src, "192.168.0.1", 1024 + i % 60000, 443, PROTO_TCP)
        labels[key] = label
        for j in range(n):
            flags = frozenset({TcpFlag.SYN}) if j == 0 else frozenset({TcpFlag.ACK})
            packet = PacketRecord(
                int(times[j]), key.src_ip, key.dst_ip, key.src_port, key.dst_port,
                key.protocol, int(lengths[j]), flags,
            )
            rows.append((packet.timestamp, i, j, packet))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    packets = [r[3] for r in rows]
    logger.info(f"Generated {len(packets)} packets in {n_flows} flows")
    return packets, labels


def _frame_bytes(packet: PacketRecord) -> bytes:
    payload_len = packet.length - 20
    if packet.protocol == PROTO_UDP:
        transport: dpkt.Packet = dpkt.udp.UDP(
            sport=packet.src_port, dport=packet.dst_port, data=b"\x00" * max(0, payload_len - 8)
        )
        transport.ulen = len(transport)
    else:
        flags = 0
        for flag, bit in (
            (TcpFlag.SYN, dpkt.tcp.TH_SYN),
            (TcpFlag.ACK, dpkt.tcp.TH_ACK),
            (TcpFlag.PSH, dpkt.tcp.TH_PUSH),
            (TcpFlag.FIN, dpkt.tcp.TH_FIN),
            (TcpFlag.RST, dpkt.tcp.TH_RST),
            (TcpFlag.ECE, dpkt.tcp.TH_ECE),
        ):
            if flag in packet.tcp_flags:
                flags |= bit
        transport = dpkt.tcp.TCP(
            sport=packet.src_port,
            dport=packet.dst_port,
            flags=flags,
            data=b"\x00" * max(0, payload_len - 20),
        )
    ip = dpkt.ip.IP(
        src=ipaddress.IPv4Address(packet.src_ip).packed,
        dst=ipaddress.IPv4Address(packet.dst_ip).packed,
        p=packet.protocol,
        data=transport,
    )
    ip.len = len(ip)
    eth = dpkt.ethernet.Ethernet(
        src=b"\x02\x00\x00\x00\x00\x01",
        dst=b"\x02\x00\x00\x00\x00\x02",
        type=dpkt.ethernet.ETH_TYPE_IP,
        data=ip,
    )
    return bytes(eth)


def pcap_bytes(packets: list[PacketRecord]) -> bytes:
    """Ethernet pcap of ``packets``; lengths below the header sizes are padded up."""
    buf = io.BytesIO()
    writer = dpkt.pcap.Writer(buf, linktype=dpkt.pcap.DLT_EN10MB)
    for packet in packets:
        writer.writepkt(_frame_bytes(packet), ts=packet.timestamp / 1_000_000)
    return buf.getvalue()


def write_pcap(packets: list[PacketRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pcap_bytes(packets))
    return path


def write_packet_csv(packets: list[PacketRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    packets_to_frame(packets).to_csv(path, index=False)
    return path


def write_labels(labels: dict[FlowKey, str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    labels_to_frame(labels).to_csv(path, index=False)
    return path
