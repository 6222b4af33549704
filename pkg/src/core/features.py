"""Incremental per-flow features computed with data-plane arithmetic.

Every statistic is an unsigned integer updated per packet with operations a
switch can perform: comparisons, additions, saturating counters and an
add-then-shift moving average.
"""

from __future__ import annotations

import io
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.exceptions import (
    EmptyContextError,
    MalformedConfigError,
    NonMonotonicTimestampError,
    UndefinedFeatureError,
)
from src.core.settings import MAX_PACKET_COUNT
from src.core.traffic import LabeledDataset, PacketRecord, TcpFlag

logger = logging.getLogger(__name__)


class FeatureId(str, Enum):
    """The 18 per-subflow features, in their stable interchange order."""

    IAT_MIN = "iat_min"
    IAT_MAX = "iat_max"
    IAT_AVG = "iat_avg"
    LEN_MIN = "len_min"
    LEN_MAX = "len_max"
    LEN_AVG = "len_avg"
    LEN_TOTAL = "len_total"
    PKT_COUNT = "pkt_count"
    SYN_COUNT = "syn_count"
    ACK_COUNT = "ack_count"
    PSH_COUNT = "psh_count"
    FIN_COUNT = "fin_count"
    RST_COUNT = "rst_count"
    ECE_COUNT = "ece_count"
    DURATION = "duration"
    SRC_PORT = "src_port"
    DST_PORT = "dst_port"
    CUR_LEN = "cur_len"

    @property
    def index(self) -> int:
        return FEATURE_INDEX[self]

    @property
    def kind(self) -> FeatureKind:
        return FEATURE_KINDS[self]


class FeatureKind(str, Enum):
    """How a feature is maintained in the data plane."""

    MIN = "min"
    MAX = "max"
    EWMA = "ewma"
    COUNTER = "counter"
    SUM = "sum"
    DURATION = "duration"
    STATELESS = "stateless"


FEATURE_INDEX: dict[FeatureId, int] = {f: i for i, f in enumerate(FeatureId)}
ALL_FEATURES: list[FeatureId] = list(FeatureId)

FEATURE_KINDS: dict[FeatureId, FeatureKind] = {
    FeatureId.IAT_MIN: FeatureKind.MIN,
    FeatureId.IAT_MAX: FeatureKind.MAX,
    FeatureId.IAT_AVG: FeatureKind.EWMA,
    FeatureId.LEN_MIN: FeatureKind.MIN,
    FeatureId.LEN_MAX: FeatureKind.MAX,
    FeatureId.LEN_AVG: FeatureKind.EWMA,
    FeatureId.LEN_TOTAL: FeatureKind.SUM,
    FeatureId.PKT_COUNT: FeatureKind.COUNTER,
    FeatureId.SYN_COUNT: FeatureKind.COUNTER,
    FeatureId.ACK_COUNT: FeatureKind.COUNTER,
    FeatureId.PSH_COUNT: FeatureKind.COUNTER,
    FeatureId.FIN_COUNT: FeatureKind.COUNTER,
    FeatureId.RST_COUNT: FeatureKind.COUNTER,
    FeatureId.ECE_COUNT: FeatureKind.COUNTER,
    FeatureId.DURATION: FeatureKind.DURATION,
    FeatureId.SRC_PORT: FeatureKind.STATELESS,
    FeatureId.DST_PORT: FeatureKind.STATELESS,
    FeatureId.CUR_LEN: FeatureKind.STATELESS,
}

FLAG_FEATURES: dict[TcpFlag, FeatureId] = {
    TcpFlag.SYN: FeatureId.SYN_COUNT,
    TcpFlag.ACK: FeatureId.ACK_COUNT,
    TcpFlag.PSH: FeatureId.PSH_COUNT,
    TcpFlag.FIN: FeatureId.FIN_COUNT,
    TcpFlag.RST: FeatureId.RST_COUNT,
    TcpFlag.ECE: FeatureId.ECE_COUNT,
}

# First packet count at which a feature holds a value.
DEFINED_FROM: dict[FeatureId, int] = {
    f: 1 for f in FeatureId
} | {FeatureId.IAT_MIN: 2, FeatureId.IAT_MAX: 2, FeatureId.IAT_AVG: 3}

# Register width a stored feature needs before quantization.
NATIVE_WIDTH: dict[FeatureId, int] = {
    FeatureId.IAT_MIN: 32,
    FeatureId.IAT_MAX: 32,
    FeatureId.IAT_AVG: 32,
    FeatureId.LEN_MIN: 16,
    FeatureId.LEN_MAX: 16,
    FeatureId.LEN_AVG: 16,
    FeatureId.LEN_TOTAL: 32,
    FeatureId.PKT_COUNT: 7,
    FeatureId.SYN_COUNT: 7,
    FeatureId.ACK_COUNT: 7,
    FeatureId.PSH_COUNT: 7,
    FeatureId.FIN_COUNT: 7,
    FeatureId.RST_COUNT: 7,
    FeatureId.ECE_COUNT: 7,
    FeatureId.DURATION: 32,
    FeatureId.SRC_PORT: 16,
    FeatureId.DST_PORT: 16,
    FeatureId.CUR_LEN: 16,
}


def sort_features(features: Iterable[FeatureId]) -> list[FeatureId]:
    """Deduplicate and order features by their interchange index."""
    return sorted(set(features), key=lambda f: f.index)


def is_stateful(feature: FeatureId) -> bool:
    return feature.kind is not FeatureKind.STATELESS


@dataclass(frozen=True)
class FeatureState:
    """Running per-flow statistics. Attribute names match ``FeatureId`` values.

    IAT fields hold 0 until the second packet; ``iat_avg`` holds the first
    IAT sample at packet 2 and becomes a defined average at packet 3.
    """

    first_ts: int
    last_ts: int
    pkt_count: int
    iat_min: int
    iat_max: int
    iat_avg: int
    len_min: int
    len_max: int
    len_avg: int
    len_total: int
    syn_count: int
    ack_count: int
    psh_count: int
    fin_count: int
    rst_count: int
    ece_count: int
    duration: int
    # Unsaturated number of packets folded, for definedness of IAT fields
    seen: int = 1


@dataclass(frozen=True)
class FeatureVector:
    """Full-precision feature snapshot of one subflow."""

    values: dict[FeatureId, int]
    undefined: frozenset[FeatureId] = frozenset()

    def get(self, feature: FeatureId) -> int:
        if feature in self.undefined:
            raise UndefinedFeatureError(f"Feature {feature.value} is undefined")
        return self.values[feature]

    def as_row(self, features: Sequence[FeatureId] = ALL_FEATURES) -> list[float]:
        """Row with NaN in undefined positions."""
        return [
            float("nan") if f in self.undefined else float(self.values[f])
            for f in features
        ]


def _saturate(count: int) -> int:
    return min(count, MAX_PACKET_COUNT)


def ewma_update(prev: int, sample: int) -> int:
    """Moving average with weight one half: ``(prev + sample) >> 1``."""
    return (prev + sample) >> 1


def init_state(packet: PacketRecord) -> FeatureState:
    """State after the first packet of a flow."""
    flags = packet.tcp_flags
    return FeatureState(
        first_ts=packet.timestamp,
        last_ts=packet.timestamp,
        pkt_count=1,
        iat_min=0,
        iat_max=0,
        iat_avg=0,
        len_min=packet.length,
        len_max=packet.length,
        len_avg=packet.length,
        len_total=packet.length,
        syn_count=int(TcpFlag.SYN in flags),
        ack_count=int(TcpFlag.ACK in flags),
        psh_count=int(TcpFlag.PSH in flags),
        fin_count=int(TcpFlag.FIN in flags),
        rst_count=int(TcpFlag.RST in flags),
        ece_count=int(TcpFlag.ECE in flags),
        duration=0,
    )


def update_state(state: FeatureState, packet: PacketRecord) -> FeatureState:
    """Fold one more packet into the running statistics."""
    iat = packet.timestamp - state.last_ts
    if iat < 0:
        raise NonMonotonicTimestampError(
            f"Packet at {packet.timestamp} µs precedes previous packet at {state.last_ts} µs"
        )

    if state.seen == 1:
        iat_min = iat_max = iat_avg = iat
    else:
        iat_min = min(state.iat_min, iat)
        iat_max = max(state.iat_max, iat)
        iat_avg = ewma_update(state.iat_avg, iat)

    flags = packet.tcp_flags
    return replace(
        state,
        last_ts=packet.timestamp,
        pkt_count=_saturate(state.pkt_count + 1),
        seen=state.seen + 1,
        iat_min=iat_min,
        iat_max=iat_max,
        iat_avg=iat_avg,
        len_min=min(state.len_min, packet.length),
        len_max=max(state.len_max, packet.length),
        len_avg=ewma_update(state.len_avg, packet.length),
        len_total=state.len_total + packet.length,
        syn_count=_saturate(state.syn_count + (TcpFlag.SYN in flags)),
        ack_count=_saturate(state.ack_count + (TcpFlag.ACK in flags)),
        psh_count=_saturate(state.psh_count + (TcpFlag.PSH in flags)),
        fin_count=_saturate(state.fin_count + (TcpFlag.FIN in flags)),
        rst_count=_saturate(state.rst_count + (TcpFlag.RST in flags)),
        ece_count=_saturate(state.ece_count + (TcpFlag.ECE in flags)),
        duration=packet.timestamp - state.first_ts,
    )


def feature_vector(state: FeatureState, packet: PacketRecord) -> FeatureVector:
    """Snapshot the state; stateless features come from ``packet``."""
    values: dict[FeatureId, int] = {
        f: int(getattr(state, f.value)) for f in FeatureId if is_stateful(f)
    }
    values[FeatureId.SRC_PORT] = packet.src_port
    values[FeatureId.DST_PORT] = packet.dst_port
    values[FeatureId.CUR_LEN] = packet.length
    undefined = frozenset(f for f, first in DEFINED_FROM.items() if state.seen < first)
    return FeatureVector(values, undefined)


def fold_features(packets: Sequence[PacketRecord]) -> FeatureVector:
    """Feature vector after folding every packet of a (sub)flow."""
    if not packets:
        raise ValueError("Cannot compute features of an empty packet list")
    state = init_state(packets[0])
    for packet in packets[1:]:
        state = update_state(state, packet)
    return feature_vector(state, packets[-1])


@dataclass
class FeatureMatrix:
    """Rows of feature snapshots for one packet count.

    ``X`` holds NaN where a feature is undefined.
    """

    X: np.ndarray
    features: list[FeatureId]
    labels: np.ndarray
    flow_ids: list[str]
    excluded: int = 0

    def __post_init__(self) -> None:
        if self.X.shape != (len(self.flow_ids), len(self.features)):
            raise ValueError(
                f"Matrix shape {self.X.shape} does not match "
                f"{len(self.flow_ids)} rows x {len(self.features)} features"
            )
        if len(self.labels) != len(self.flow_ids):
            raise ValueError("labels and flow_ids differ in length")

    def __len__(self) -> int:
        return len(self.flow_ids)

    def defined_features(self) -> list[FeatureId]:
        """Features defined on every row."""
        if len(self) == 0:
            return []
        mask = ~np.isnan(self.X).any(axis=0)
        return [f for f, ok in zip(self.features, mask, strict=True) if ok]

    def select(self, features: Sequence[FeatureId]) -> np.ndarray:
        """Columns for ``features`` in the given order."""
        positions = [self.features.index(f) for f in features]
        return self.X[:, positions]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=[f.value for f in self.features])
        finite = self.X[~np.isnan(self.X)]
        if np.array_equal(finite, np.floor(finite)):
            frame = frame.astype("Int64")
        frame.insert(0, "flow_id", self.flow_ids)
        frame["label"] = self.labels
        return frame

    def to_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> FeatureMatrix:
        if "label" not in frame.columns:
            raise MalformedConfigError("Feature CSV lacks a label column")
        try:
            features = [
                FeatureId(c) for c in frame.columns if c not in ("label", "flow_id")
            ]
        except ValueError as e:
            raise MalformedConfigError(f"Unknown feature column: {e}") from e
        if "flow_id" in frame.columns:
            flow_ids = [str(v) for v in frame["flow_id"]]
        else:
            flow_ids = [f"row-{i}" for i in range(len(frame))]
        try:
            X = frame[[f.value for f in features]].astype("float64").to_numpy()
        except (ValueError, TypeError) as e:
            raise MalformedConfigError(f"Non-numeric feature values: {e}") from e
        labels = frame["label"].astype(str).to_numpy(dtype=object)
        return cls(X.reshape(len(frame), len(features)), features, labels, flow_ids)

    @classmethod
    def read_csv(cls, path: Path) -> FeatureMatrix:
        raw = Path(path).read_bytes()
        try:
            frame = pd.read_csv(io.BytesIO(raw), dtype={"label": str, "flow_id": str})
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise MalformedConfigError(f"Unreadable feature CSV {path}: {e}") from e
        return cls.from_frame(frame)


def extract_contexts(
    dataset: LabeledDataset, packet_counts: Sequence[int]
) -> dict[int, FeatureMatrix]:
    """Feature matrices for several packet counts in one pass over each flow.

    Contexts no flow reaches map to empty matrices.
    """
    counts = sorted(set(packet_counts))
    if not counts or counts[0] < 1:
        raise ValueError("Packet counts must be positive")
    rows: dict[int, list[list[float]]] = {n: [] for n in counts}
    labels: dict[int, list[str]] = {n: [] for n in counts}
    ids: dict[int, list[str]] = {n: [] for n in counts}

    for flow in dataset.flows:
        targets = [n for n in counts if n <= len(flow.packets)]
        if not targets:
            continue
        state = init_state(flow.packets[0])
        seen = 1
        for n in targets:
            while seen < n:
                state = update_state(state, flow.packets[seen])
                seen += 1
            rows[n].append(feature_vector(state, flow.packets[n - 1]).as_row())
            labels[n].append(str(flow.label))
            ids[n].append(str(flow.key))

    matrices: dict[int, FeatureMatrix] = {}
    for n in counts:
        X = np.array(rows[n], dtype=np.float64).reshape(len(rows[n]), len(ALL_FEATURES))
        matrices[n] = FeatureMatrix(
            X,
            list(ALL_FEATURES),
            np.array(labels[n], dtype=object),
            ids[n],
            excluded=len(dataset.flows) - len(rows[n]),
        )
    return matrices


def extract_dataset(dataset: LabeledDataset, n: int) -> FeatureMatrix:
    """Feature matrix of every flow's first ``n`` packets.

    Flows shorter than ``n`` are excluded and counted in ``excluded``.
    """
    if n < 1:
        raise ValueError(f"Packet count must be at least 1, got {n}")
    matrix = extract_contexts(dataset, [n])[n]
    if len(matrix) == 0:
        raise EmptyContextError(f"No flow has at least {n} packets")
    logger.debug(f"Context {n}: {len(matrix)} flows, {matrix.excluded} too short")
    return matrix


def extract_full(dataset: LabeledDataset) -> FeatureMatrix:
    """Feature matrix of completed flows (every packet folded)."""
    rows = [fold_features(flow.packets).as_row() for flow in dataset.flows]
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(ALL_FEATURES))
    return FeatureMatrix(
        X,
        list(ALL_FEATURES),
        np.array([str(f.label) for f in dataset.flows], dtype=object),
        [str(f.key) for f in dataset.flows],
    )
