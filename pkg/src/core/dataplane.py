"""Software model of the switch pipeline executing a deployment config.

Per packet: find or claim the flow's register row, update the packed feature
fields with integer operations, pick the model for the packet count, walk the
tables of every tree, aggregate votes and gate on certainty.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
import pandas as pd

from src.core.compiler import (
    CompiledModel,
    DeploymentConfig,
    MemoryReport,
    QuantSpec,
    certainty_code,
    memory_to_record,
    model_for_count,
    quantize_threshold,
    quantize_value,
)
from src.core.exceptions import MissingEntryError, NonMonotonicTimestampError
from src.core.features import FLAG_FEATURES, FeatureId, FeatureKind
from src.core.forest import RandomForest, f1_macro
from src.core.models import ActionKind, CountStatRecord, SimulationStatsRecord
from src.core.settings import MAX_PACKET_COUNT, TIMESTAMP_BITS, TIMESTAMP_UNIT_SHIFT
from src.core.traffic import FlowKey, PacketRecord

logger = logging.getLogger(__name__)

TIMESTAMP_MASK = (1 << TIMESTAMP_BITS) - 1
VERDICT_COLUMNS = ["flow_key", "packet_index", "verdict", "label", "certainty"]


def timestamp_field(now_us: int) -> int:
    """Coarse wrapping timestamp stored per row."""
    return (now_us >> TIMESTAMP_UNIT_SHIFT) & TIMESTAMP_MASK


def elapsed_us(last_field: int, now_us: int) -> int:
    """Wrap-aware time since ``last_field``, at field resolution."""
    return ((timestamp_field(now_us) - last_field) & TIMESTAMP_MASK) << TIMESTAMP_UNIT_SHIFT


# Integer feature updates on the stored fields


def _store(v: int, spec: QuantSpec) -> int:
    """Stored-domain code: the quantized value with ``guard_bits`` extra fraction bits."""
    q = math.floor(math.ldexp(v, spec.guard_bits - spec.shift))
    return min(max(q, 0), (1 << spec.width) - 1)


def _stored_max(spec: QuantSpec) -> int:
    return (1 << spec.width) - 1


def initial_row_fields(config: DeploymentConfig, packet: PacketRecord) -> dict[FeatureId, int]:
    """Stored fields after a flow's first packet."""
    fields: dict[FeatureId, int] = {}
    for f in config.layout.features:
        spec = config.quant[f]
        kind = f.kind
        if f in (FeatureId.IAT_MIN, FeatureId.IAT_MAX, FeatureId.IAT_AVG):
            fields[f] = 0
        elif kind is FeatureKind.COUNTER:
            fields[f] = _store(1, spec) if _flag_set(f, packet) else 0
        elif kind is FeatureKind.DURATION:
            fields[f] = 0
        else:
            fields[f] = _store(packet.length, spec)
    return fields


_FLAG_OF = {f: flag for flag, f in FLAG_FEATURES.items()}


def _flag_set(feature: FeatureId, packet: PacketRecord) -> bool:
    return _FLAG_OF[feature] in packet.tcp_flags


def update_row_fields(
    config: DeploymentConfig,
    fields: Mapping[FeatureId, int],
    packet: PacketRecord,
    iat_us: int,
    seen: int,
) -> dict[FeatureId, int]:
    """Fold one packet into the stored fields.

    ``seen`` is the packet count before this packet. IAT statistics take
    their first sample at the second packet; moving averages are updated as
    ``(prev + sample) >> 1`` on guard-bit codes.
    """
    updated = dict(fields)
    for f in config.layout.features:
        spec = config.quant[f]
        prev = fields[f]
        top = _stored_max(spec)
        if f in (FeatureId.IAT_MIN, FeatureId.IAT_MAX, FeatureId.IAT_AVG):
            sample = _store(iat_us, spec)
            if seen == 1:
                updated[f] = sample
            elif f is FeatureId.IAT_MIN:
                updated[f] = min(prev, sample)
            elif f is FeatureId.IAT_MAX:
                updated[f] = max(prev, sample)
            else:
                updated[f] = (prev + sample) >> 1
        elif f is FeatureId.LEN_MIN:
            updated[f] = min(prev, _store(packet.length, spec))
        elif f is FeatureId.LEN_MAX:
            updated[f] = max(prev, _store(packet.length, spec))
        elif f is FeatureId.LEN_AVG:
            updated[f] = (prev + _store(packet.length, spec)) >> 1
        elif f is FeatureId.LEN_TOTAL:
            updated[f] = min(prev + _store(packet.length, spec), top)
        elif f.kind is FeatureKind.COUNTER:
            if _flag_set(f, packet):
                updated[f] = min(prev + _store(1, spec), _store(MAX_PACKET_COUNT, spec), top)
        elif f is FeatureId.DURATION:
            updated[f] = min(prev + _store(iat_us, spec), top)
    return updated


def compare_values(
    config: DeploymentConfig,
    fields: Mapping[FeatureId, int],
    packet_count: int,
    packet: PacketRecord,
) -> dict[FeatureId, int]:
    """Quantized values the tables compare, for every quantized feature."""
    values: dict[FeatureId, int] = {}
    for f, spec in config.quant.items():
        if f in fields:
            values[f] = fields[f] >> spec.guard_bits
        elif f is FeatureId.PKT_COUNT:
            values[f] = quantize_value(packet_count, spec)
        elif f is FeatureId.SRC_PORT:
            values[f] = quantize_value(packet.src_port, spec)
        elif f is FeatureId.DST_PORT:
            values[f] = quantize_value(packet.dst_port, spec)
        elif f is FeatureId.CUR_LEN:
            values[f] = quantize_value(packet.length, spec)
    return values


def reference_fields(packets: Sequence[PacketRecord], config: DeploymentConfig) -> dict[FeatureId, int]:
    """Compare values after folding ``packets`` outside any register table."""
    if not packets:
        raise ValueError("Cannot fold an empty packet list")
    fields = initial_row_fields(config, packets[0])
    count = 1
    for previous, packet in zip(packets, packets[1:], strict=False):
        iat = packet.timestamp - previous.timestamp
        fields = update_row_fields(config, fields, packet, iat, count)
        count = min(count + 1, MAX_PACKET_COUNT)
    return compare_values(config, fields, count, packets[-1])


# Table evaluation


def table_walk(model: CompiledModel, values: Mapping[FeatureId, int]) -> list[tuple[int, int]]:
    """(label, certainty code) of every tree, walking one table per level."""
    outputs = []
    for t, levels in enumerate(model.lookup_tables()):
        state = (0, False)
        entry = None
        for level, table in enumerate(levels):
            entry = table.get(state)
            if entry is None:
                raise MissingEntryError(f"Tree {t} level {level} has no entry for {state}")
            if entry.kind is ActionKind.INTERNAL:
                assert entry.feature is not None and entry.threshold_q is not None
                if entry.feature not in values:
                    raise MissingEntryError(f"No value for {entry.feature.value}")
                state = (int(entry.next_node or 0), values[entry.feature] > entry.threshold_q)
            else:
                state = (int(entry.leaf_node or 0), False)
        if entry is None or entry.kind is not ActionKind.LEAF:
            raise MissingEntryError(f"Tree {t} does not end in a leaf")
        assert entry.label is not None and entry.certainty_q is not None
        outputs.append((entry.label, entry.certainty_q))
    return outputs


def aggregate_votes(outputs: Iterable[tuple[int, int]]) -> tuple[int, int]:
    """Majority label (ties to the smallest) and the floor mean of its certainty codes."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("No tree outputs to aggregate")
    votes = Counter(label for label, _ in outputs)
    top = max(votes.values())
    winner = min(label for label, n in votes.items() if n == top)
    codes = [c for label, c in outputs if label == winner]
    return winner, sum(codes) // len(codes)


def quantized_predict(
    forest: RandomForest, quant: Mapping[FeatureId, QuantSpec], values: Mapping[FeatureId, int]
) -> tuple[int, int]:
    """Direct tree traversal on quantized values with quantized thresholds."""
    outputs = []
    for tree in forest.trees:
        node = tree.root
        while not node.is_leaf:
            assert node.feature is not None and node.threshold is not None
            assert node.left is not None and node.right is not None
            t_q = quantize_threshold(node.threshold, quant[node.feature])
            node = node.right if values[node.feature] > t_q else node.left
        outputs.append((node.label, certainty_code(node.certainty)))
    return aggregate_votes(outputs)


# Switch


class VerdictKind(str, Enum):
    CLASSIFIED = "classified"
    PENDING = "pending"
    UNCLASSIFIED = "unclassified"


class PendingReason(str, Enum):
    NO_MODEL = "no_model"
    LOW_CERTAINTY = "low_certainty"


class SlotStatus(str, Enum):
    HIT = "hit"
    ALLOCATED = "allocated"
    FULL = "full"


@dataclass(frozen=True)
class SlotResult:
    status: SlotStatus
    index: int | None = None


@dataclass(frozen=True)
class Verdict:
    """Outcome of one packet. ``UNCLASSIFIED`` marks the table-full flag."""

    kind: VerdictKind
    key: FlowKey
    packet_count: int = 0
    label: int | None = None
    certainty_q: int | None = None
    reason: PendingReason | None = None


@dataclass
class FlowRow:
    """One register row.

    ``last_ts`` is the wrapping 17-bit field that drives timeouts and is
    counted in the memory report. ``last_us`` is the arrival time of the
    flow's last packet in microseconds; inter-arrival samples are exact
    deltas of it.
    """

    valid: bool = False
    flow_id: int = 0
    last_ts: int = 0
    last_us: int = 0
    count: int = 0
    features: int = 0

    def claim(self, flow_id: int, now_us: int) -> None:
        self.valid = True
        self.flow_id = flow_id
        self.touch(now_us)
        self.count = 0
        self.features = 0

    def touch(self, now_us: int) -> None:
        self.last_ts = timestamp_field(now_us)
        self.last_us = now_us

    def clear(self) -> None:
        self.claim(0, 0)
        self.valid = False


@dataclass
class SwitchCounters:
    classified: int = 0
    no_model_yet: int = 0
    low_certainty: int = 0
    table_full: int = 0
    evicted: int = 0
    hash_hits: int = 0
    collisions: int = 0


class Switch:
    """Fixed register table of ``rows`` flow rows probed by ``probes`` hashes."""

    def __init__(
        self,
        config: DeploymentConfig,
        rows: int = 65536,
        probes: int = 3,
        timeout_us: int = 10_000_000,
        seed: int = 0,
    ):
        if rows < 1:
            raise ValueError(f"rows must be at least 1, got {rows}")
        if probes < 1:
            raise ValueError(f"probes must be at least 1, got {probes}")
        self.config = config
        self.rows = [FlowRow() for _ in range(rows)]
        self.timeout_us = timeout_us
        self.counters = SwitchCounters()
        self.hash_seeds = self._derive_seeds(probes, seed)

    @staticmethod
    def _derive_seeds(probes: int, seed: int) -> list[int]:
        rng = np.random.default_rng(seed)
        seeds: list[int] = []
        while len(seeds) < probes:
            candidate = int(rng.integers(1, 1 << 32))
            if candidate not in seeds:
                seeds.append(candidate)
        return seeds

    @property
    def memory(self) -> MemoryReport:
        return self.config.memory

    @property
    def register_bits(self) -> int:
        return self.memory.register_bits(len(self.rows))

    def occupied(self) -> int:
        return sum(row.valid for row in self.rows)

    @staticmethod
    def flow_id(key: FlowKey) -> int:
        """32-bit CRC of the 5-tuple bytes."""
        return zlib.crc32(key.to_bytes())

    def probe_indices(self, key: FlowKey) -> list[int]:
        data = key.to_bytes()
        return [zlib.crc32(data, s) % len(self.rows) for s in self.hash_seeds]

    def _expired(self, row: FlowRow, now_us: int) -> bool:
        return elapsed_us(row.last_ts, now_us) > self.timeout_us

    def lookup_or_allocate(self, key: FlowKey, now_us: int) -> SlotResult:
        """Find the row holding ``key`` or claim the first usable probed row."""
        fid = self.flow_id(key)
        indices = self.probe_indices(key)
        for i in indices:
            row = self.rows[i]
            if row.valid and row.flow_id == fid:
                if self._expired(row, now_us):
                    row.claim(fid, now_us)
                    return SlotResult(SlotStatus.ALLOCATED, i)
                self.counters.hash_hits += 1
                return SlotResult(SlotStatus.HIT, i)
        for position, i in enumerate(indices):
            row = self.rows[i]
            if row.valid and not self._expired(row, now_us):
                continue
            if row.valid:
                self.counters.evicted += 1
            if position > 0:
                self.counters.collisions += 1
            row.claim(fid, now_us)
            return SlotResult(SlotStatus.ALLOCATED, i)
        return SlotResult(SlotStatus.FULL)

    def process_packet(self, packet: PacketRecord, now_us: int | None = None) -> Verdict:
        now = packet.timestamp if now_us is None else now_us
        key = packet.key
        slot = self.lookup_or_allocate(key, now)
        if slot.status is SlotStatus.FULL:
            self.counters.table_full += 1
            return Verdict(VerdictKind.UNCLASSIFIED, key)

        assert slot.index is not None
        row = self.rows[slot.index]
        layout = self.config.layout
        if slot.status is SlotStatus.ALLOCATED:
            fields = initial_row_fields(self.config, packet)
            count = 1
        else:
            iat = now - row.last_us
            fields = update_row_fields(self.config, layout.unpack(row.features), packet, iat, row.count)
            count = min(row.count + 1, MAX_PACKET_COUNT)
        row.features = layout.pack(fields)
        row.count = count
        row.touch(now)

        model = model_for_count(self.config, count)
        if model is None:
            self.counters.no_model_yet += 1
            return Verdict(VerdictKind.PENDING, key, count, reason=PendingReason.NO_MODEL)

        values = compare_values(self.config, fields, count, packet)
        label, certainty_q = aggregate_votes(table_walk(self.config.models[model], values))
        if certainty_q >= self.config.thr_c_q:
            self.counters.classified += 1
            row.clear()
            return Verdict(VerdictKind.CLASSIFIED, key, count, label, certainty_q)
        self.counters.low_certainty += 1
        return Verdict(
            VerdictKind.PENDING, key, count, label, certainty_q, PendingReason.LOW_CERTAINTY
        )


def new_switch(
    config: DeploymentConfig,
    rows: int = 65536,
    probes: int = 3,
    timeout_us: int = 10_000_000,
    seed: int = 0,
) -> Switch:
    """Empty switch with ``probes`` seeded hash functions."""
    switch = Switch(config, rows, probes, timeout_us, seed)
    logger.info(
        f"Switch with {rows} rows of {config.memory.row_bits} bits "
        f"({switch.register_bits} register bits)"
    )
    return switch


# Replay


@dataclass
class CountStat:
    packet_count: int
    classified: int
    classified_pct: float
    cumulative_classified_pct: float
    cumulative_f1: float | None


@dataclass
class SimulationStats:
    packets: int = 0
    flows: int = 0
    classified_flows: int = 0
    f1_classified: float | None = None
    counters: SwitchCounters = field(default_factory=SwitchCounters)
    rows: int = 0
    register_bits: int = 0
    memory: MemoryReport | None = None
    per_count: list[CountStat] = field(default_factory=list)

    @property
    def classified_pct(self) -> float:
        return 100.0 * self.classified_flows / self.flows if self.flows else 0.0

    def to_record(self, run_config: dict[str, Any] | None = None) -> SimulationStatsRecord:
        c = self.counters
        return SimulationStatsRecord(
            run_config=run_config or {},
            packets=self.packets,
            flows=self.flows,
            classified_flows=self.classified_flows,
            classified_pct=self.classified_pct,
            f1_classified=self.f1_classified,
            collisions=c.collisions,
            table_full=c.table_full,
            evicted=c.evicted,
            hash_hits=c.hash_hits,
            no_model_yet=c.no_model_yet,
            low_certainty=c.low_certainty,
            rows=self.rows,
            register_bits=self.register_bits,
            memory=memory_to_record(self.memory) if self.memory else None,
            per_count=[CountStatRecord(**vars(s)) for s in self.per_count],
        )


@dataclass(frozen=True)
class VerdictLogEntry:
    flow_key: FlowKey
    packet_index: int
    verdict: Verdict


@dataclass
class SimulationResult:
    stats: SimulationStats
    log: list[VerdictLogEntry]
    # first classification per flow: packet index and label index
    decisions: dict[FlowKey, tuple[int, int]]

    def verdict_frame(self, classes: Sequence[str]) -> pd.DataFrame:
        rows = [
            {
                "flow_key": str(e.flow_key),
                "packet_index": e.packet_index,
                "verdict": e.verdict.kind.value,
                "label": classes[e.verdict.label] if e.verdict.label is not None else "",
                "certainty": e.verdict.certainty_q if e.verdict.certainty_q is not None else "",
            }
            for e in self.log
        ]
        return pd.DataFrame(rows, columns=VERDICT_COLUMNS)


def replay(
    switch: Switch,
    packets: Sequence[PacketRecord],
    labels: Mapping[FlowKey, str] | None = None,
) -> SimulationResult:
    """Run a time-ordered trace through ``switch`` and summarize the verdicts."""
    labels = labels or {}
    classes = switch.config.classes
    position: dict[FlowKey, int] = {}
    decisions: dict[FlowKey, tuple[int, int]] = {}
    log: list[VerdictLogEntry] = []
    previous = None
    for packet in packets:
        if previous is not None and packet.timestamp < previous:
            raise NonMonotonicTimestampError(
                f"Trace goes back in time at {packet.timestamp} µs"
            )
        previous = packet.timestamp
        key = packet.key
        position[key] = position.get(key, 0) + 1
        verdict = switch.process_packet(packet)
        log.append(VerdictLogEntry(key, position[key], verdict))
        if verdict.kind is VerdictKind.CLASSIFIED and key not in decisions:
            assert verdict.label is not None
            decisions[key] = (position[key], verdict.label)

    stats = SimulationStats(
        packets=len(packets),
        flows=len(position),
        classified_flows=len(decisions),
        counters=switch.counters,
        rows=len(switch.rows),
        register_bits=switch.register_bits,
        memory=switch.memory,
    )
    stats.f1_classified = _decision_f1(decisions.items(), labels, classes)

    cumulative = 0
    ordered = sorted(decisions.items(), key=lambda kv: kv[1][0])
    for count in sorted({index for index, _ in decisions.values()}):
        at = [kv for kv in ordered if kv[1][0] == count]
        cumulative += len(at)
        upto = [kv for kv in ordered if kv[1][0] <= count]
        stats.per_count.append(
            CountStat(
                packet_count=count,
                classified=len(at),
                classified_pct=100.0 * len(at) / stats.flows,
                cumulative_classified_pct=100.0 * cumulative / stats.flows,
                cumulative_f1=_decision_f1(upto, labels, classes),
            )
        )
    logger.info(
        f"Replayed {stats.packets} packets: {stats.classified_flows}/{stats.flows} flows classified, "
        f"{switch.occupied()} rows still held"
    )
    return SimulationResult(stats, log, decisions)


def _decision_f1(
    decisions: Iterable[tuple[FlowKey, tuple[int, int]]],
    labels: Mapping[FlowKey, str],
    classes: Sequence[str],
) -> float | None:
    truth, predicted = [], []
    for key, (_, label) in decisions:
        if key in labels:
            truth.append(labels[key])
            predicted.append(classes[label])
    if not truth:
        return None
    return f1_macro(truth, predicted, classes)
