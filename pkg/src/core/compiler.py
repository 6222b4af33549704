"""Compile a context classifier into match&action table configuration.

The output is pure data: quantization specs per feature, a packed bit layout
for the per-flow feature registers, one table per tree and level, and a
packet-count to model switch.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from src.core.context_trainer import Classifier
from src.core.exceptions import (
    DepthExceededError,
    HardwareLimitExceededError,
    MalformedConfigError,
)
from src.core.features import (
    NATIVE_WIDTH,
    FeatureId,
    FeatureKind,
    is_stateful,
    sort_features,
)
from src.core.forest import DecisionTree, RandomForest, TreeNode
from src.core.models import (
    ActionKind,
    CompiledModelRecord,
    DeploymentRecord,
    LayoutFieldRecord,
    MemoryRecord,
    QuantSpecRecord,
    SwitchRangeRecord,
    TableEntryRecord,
)
from src.core.settings import MAX_PACKET_COUNT, TIMESTAMP_BITS
from src.utils.artifacts import dumps_canonical, loads_record

logger = logging.getLogger(__name__)

DEFAULT_ACCURACY = 0.01
EWMA_GUARD_BITS = 2
STATELESS_BITS = 16
CERTAINTY_SCALE = 255
FLOW_ID_BITS = 32
BASE_ROW_BITS = FLOW_ID_BITS + TIMESTAMP_BITS
PACKET_COUNT_BITS = 7
BITS_PER_10MB = 80_000_000


def floor_log2(x: float) -> int:
    """Exact ``floor(log2(x))`` for ``x > 0``."""
    if x <= 0:
        raise ValueError(f"log2 of non-positive value {x}")
    _, exponent = math.frexp(x)
    return exponent - 1


@dataclass(frozen=True)
class QuantSpec:
    """Fixed-point encoding of one feature: ``v_q = floor(v / 2**shift)`` in ``bits`` bits."""

    feature: FeatureId
    bits: int
    shift: int
    t_min: float
    t_max: float
    guard_bits: int = 0

    @property
    def width(self) -> int:
        """Stored field width, guard bits included."""
        return self.bits + self.guard_bits

    @property
    def max_value(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class HardwareLimits:
    max_trees: int = 32
    max_depth: int = 20
    stages: int = 24


def quantize_spec(
    feature: FeatureId, thresholds: Iterable[float], accuracy: float = DEFAULT_ACCURACY
) -> QuantSpec:
    """Bits and shift that keep every threshold comparison within ``accuracy``.

    ``bits = floor(log2(2 t_max / (t_min a / 2))) + 1`` and
    ``shift = floor(log2(t_min a / 2))``. Counters use ``a = 1`` and
    ``t_min = 1``; stateless fields keep their native 16 bits. A non-positive
    threshold falls back to the native width with shift 0.
    """
    values = sorted(float(t) for t in thresholds)
    if not values:
        raise ValueError(f"No thresholds for {feature.value}")
    if accuracy <= 0:
        raise ValueError(f"Accuracy must be positive, got {accuracy}")
    t_min, t_max = values[0], values[-1]
    guard = EWMA_GUARD_BITS if feature.kind is FeatureKind.EWMA else 0

    if feature.kind is FeatureKind.STATELESS:
        return QuantSpec(feature, STATELESS_BITS, 0, t_min, t_max)
    if t_min <= 0:
        logger.warning(
            f"Non-positive threshold {t_min} for {feature.value}; "
            f"using native {NATIVE_WIDTH[feature]} bits"
        )
        return QuantSpec(feature, NATIVE_WIDTH[feature], 0, t_min, t_max, guard)

    a, low = accuracy, t_min
    if feature.kind is FeatureKind.COUNTER:
        a, low = 1.0, 1.0
    step = low * 0.5 * a
    bits = floor_log2(2.0 * t_max / step) + 1
    shift = floor_log2(step)
    return QuantSpec(feature, max(1, bits), shift, t_min, t_max, guard)


def quantize_value(v: float, spec: QuantSpec) -> int:
    """``clamp(floor(v / 2**shift), 0, 2**bits - 1)``; negative shifts scale up."""
    q = math.floor(math.ldexp(v, -spec.shift))
    return min(max(q, 0), spec.max_value)


def quantize_threshold(t: float, spec: QuantSpec) -> int:
    """Quantize a split threshold like a value, keeping it below the saturation code.

    A saturated value therefore always compares greater than any threshold.
    """
    q = math.floor(math.ldexp(t, -spec.shift))
    top = spec.max_value - 1 if spec.bits >= 2 else spec.max_value
    return min(max(q, 0), top)


def certainty_code(certainty: float) -> int:
    """Certainty in [0, 1] rounded to an 8-bit code."""
    return min(CERTAINTY_SCALE, max(0, math.floor(certainty * CERTAINTY_SCALE + 0.5)))


def certainty_threshold_code(thr_c: float) -> int:
    """Smallest code accepted by a certainty threshold: ``ceil(thr_c * 255)``."""
    # round first so 0.2 * 255 = 51.000000000000007 maps to 51
    return math.ceil(round(thr_c * CERTAINTY_SCALE, 9))


@dataclass(frozen=True)
class LayoutField:
    feature: FeatureId
    offset: int
    width: int

    @property
    def mask(self) -> int:
        return (1 << self.width) - 1


@dataclass
class BitLayout:
    """Contiguous feature fields of the per-flow register bitstring."""

    fields: list[LayoutField]

    @property
    def total(self) -> int:
        return sum(f.width for f in self.fields)

    @property
    def features(self) -> list[FeatureId]:
        return [f.feature for f in self.fields]

    def field_for(self, feature: FeatureId) -> LayoutField:
        for f in self.fields:
            if f.feature is feature:
                return f
        raise KeyError(feature)

    def pack(self, values: Mapping[FeatureId, int]) -> int:
        """Concatenate field values; each must fit its width."""
        bits = 0
        for f in self.fields:
            v = int(values.get(f.feature, 0))
            if not 0 <= v <= f.mask:
                raise ValueError(f"{f.feature.value}={v} does not fit {f.width} bits")
            bits |= v << f.offset
        return bits

    def unpack(self, bits: int) -> dict[FeatureId, int]:
        return {f.feature: (bits >> f.offset) & f.mask for f in self.fields}


def layout_features(specs: Iterable[QuantSpec]) -> BitLayout:
    """Register fields for stateful features, in feature order.

    The packet count lives in its own row field and stateless features come
    from the packet, so neither takes layout space.
    """
    stored = [
        s for s in specs if is_stateful(s.feature) and s.feature is not FeatureId.PKT_COUNT
    ]
    stored.sort(key=lambda s: s.feature.index)
    fields = []
    offset = 0
    for spec in stored:
        fields.append(LayoutField(spec.feature, offset, spec.width))
        offset += spec.width
    return BitLayout(fields)


@dataclass(frozen=True)
class TableEntry:
    """One match&action entry keyed by the previous node and comparison result."""

    node: int
    prev_result: bool
    kind: ActionKind
    next_node: int | None = None
    feature: FeatureId | None = None
    threshold_q: int | None = None
    leaf_node: int | None = None
    label: int | None = None
    certainty_q: int | None = None

    @property
    def key(self) -> tuple[int, bool]:
        return (self.node, self.prev_result)


@dataclass
class CompiledModel:
    """Tables of one forest: tree -> level -> entries."""

    features: list[FeatureId]
    depth: int
    trees: list[list[list[TableEntry]]]
    _index: list[list[dict[tuple[int, bool], TableEntry]]] | None = field(
        default=None, init=False, repr=False, compare=False
    )

    @property
    def levels(self) -> int:
        return self.depth + 1

    def lookup_tables(self) -> list[list[dict[tuple[int, bool], TableEntry]]]:
        """Per tree and level, entries indexed by key."""
        if self._index is None:
            self._index = [
                [{e.key: e for e in level} for level in tree] for tree in self.trees
            ]
        return self._index

    def entry_count(self) -> int:
        return sum(len(level) for tree in self.trees for level in tree)


def compile_tree(
    tree: DecisionTree, model_max_depth: int, specs: Mapping[FeatureId, QuantSpec]
) -> list[list[TableEntry]]:
    """Breadth-first encoding of one tree into ``model_max_depth + 1`` levels.

    Node ids are assigned in BFS order with the root as 0; the root entry is
    keyed ``(0, False)``. A leaf above the last level is carried down by
    pass-through entries keyed ``(leaf_id, False)``.
    """
    if tree.depth > model_max_depth:
        raise DepthExceededError(
            f"Tree depth {tree.depth} exceeds model depth {model_max_depth}"
        )
    levels: list[list[TableEntry]] = [[] for _ in range(model_max_depth + 1)]
    frontier: list[tuple[TreeNode, int, tuple[int, bool]]] = [(tree.root, 0, (0, False))]
    next_id = 1
    for level in range(model_max_depth + 1):
        following: list[tuple[TreeNode, int, tuple[int, bool]]] = []
        for node, node_id, (parent, result) in frontier:
            if node.is_leaf:
                leaf = TableEntry(
                    parent,
                    result,
                    ActionKind.LEAF,
                    leaf_node=node_id,
                    label=node.label,
                    certainty_q=certainty_code(node.certainty),
                )
                levels[level].append(leaf)
                for below in range(level + 1, model_max_depth + 1):
                    levels[below].append(
                        TableEntry(
                            node_id,
                            False,
                            ActionKind.LEAF,
                            leaf_node=node_id,
                            label=leaf.label,
                            certainty_q=leaf.certainty_q,
                        )
                    )
                continue
            assert node.feature is not None and node.threshold is not None
            assert node.left is not None and node.right is not None
            levels[level].append(
                TableEntry(
                    parent,
                    result,
                    ActionKind.INTERNAL,
                    next_node=node_id,
                    feature=node.feature,
                    threshold_q=quantize_threshold(node.threshold, specs[node.feature]),
                )
            )
            following.append((node.left, next_id, (node_id, False)))
            following.append((node.right, next_id + 1, (node_id, True)))
            next_id += 2
        frontier = following
    return levels


def compile_forest(forest: RandomForest, specs: Mapping[FeatureId, QuantSpec]) -> CompiledModel:
    depth = forest.depth
    return CompiledModel(
        features=list(forest.features),
        depth=depth,
        trees=[compile_tree(tree, depth, specs) for tree in forest.trees],
    )


def forest_thresholds(forest: RandomForest) -> dict[FeatureId, list[float]]:
    """Split thresholds per feature over every tree."""
    found: dict[FeatureId, list[float]] = {}
    for tree in forest.trees:
        stack = deque([tree.root])
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            assert node.feature is not None and node.threshold is not None
            assert node.left is not None and node.right is not None
            found.setdefault(node.feature, []).append(node.threshold)
            stack.extend([node.left, node.right])
    return found


@dataclass(frozen=True)
class SwitchRange:
    """Packet counts ``min_count..max_count`` use compiled model ``model``."""

    min_count: int
    max_count: int
    model: int


@dataclass(frozen=True)
class MemoryReport:
    base_bits: int
    packet_count_bits: int
    feature_bits: dict[FeatureId, int]
    row_bits: int
    flows_per_10mb: int

    @classmethod
    def for_layout(cls, layout: BitLayout) -> MemoryReport:
        row = BASE_ROW_BITS + PACKET_COUNT_BITS + layout.total
        return cls(
            base_bits=BASE_ROW_BITS,
            packet_count_bits=PACKET_COUNT_BITS,
            feature_bits={f.feature: f.width for f in layout.fields},
            row_bits=row,
            flows_per_10mb=BITS_PER_10MB // row,
        )

    def register_bits(self, rows: int) -> int:
        return rows * self.row_bits


@dataclass
class DeploymentConfig:
    """Everything the switch needs at runtime."""

    classes: list[str]
    accuracy: float
    quant: dict[FeatureId, QuantSpec]
    layout: BitLayout
    models: list[CompiledModel]
    model_switch: list[SwitchRange]
    thr_c_q: int
    limits: HardwareLimits
    memory: MemoryReport
    run_config: dict[str, Any] = field(default_factory=dict)


def model_for_count(config: DeploymentConfig, packet_count: int) -> int | None:
    """Compiled model index active at ``packet_count``, or None before the first."""
    for r in config.model_switch:
        if r.min_count <= packet_count <= r.max_count:
            return r.model
    return None


def _check_limits(forest: RandomForest, index: int, limits: HardwareLimits) -> None:
    if len(forest.trees) > limits.max_trees:
        raise HardwareLimitExceededError("max_trees", limits.max_trees, len(forest.trees))
    if forest.depth > limits.max_depth:
        raise HardwareLimitExceededError("max_depth", limits.max_depth, forest.depth)
    if forest.depth + 1 > limits.stages:
        raise HardwareLimitExceededError("stages", limits.stages, forest.depth + 1)
    logger.debug(f"Forest {index}: {len(forest.trees)} trees, depth {forest.depth}")


def compile_classifier(
    classifier: Classifier,
    accuracy: float = DEFAULT_ACCURACY,
    limits: HardwareLimits | None = None,
    run_config: dict[str, Any] | None = None,
) -> DeploymentConfig:
    """Quantize, lay out and encode every forest of ``classifier``.

    Thresholds are pooled per feature across all forests. Forests shared by
    reusing models are compiled once.
    """
    limits = limits or HardwareLimits()
    forests = classifier.forests()
    for i, forest in enumerate(forests):
        _check_limits(forest, i, limits)

    pooled: dict[FeatureId, list[float]] = {}
    for forest in forests:
        for feature, values in forest_thresholds(forest).items():
            pooled.setdefault(feature, []).extend(values)
    quant = {f: quantize_spec(f, pooled[f], accuracy) for f in sort_features(pooled)}
    layout = layout_features(quant.values())
    models = [compile_forest(f, quant) for f in forests]

    switch = []
    for i, model in enumerate(classifier.models):
        last = (
            classifier.models[i + 1].activation_count - 1
            if i + 1 < len(classifier.models)
            else MAX_PACKET_COUNT
        )
        index = next(j for j, f in enumerate(forests) if f is model.forest)
        switch.append(SwitchRange(model.activation_count, last, index))

    memory = MemoryReport.for_layout(layout)
    logger.info(
        f"Compiled {len(models)} models, {sum(m.entry_count() for m in models)} entries, "
        f"{memory.row_bits} bits per flow"
    )
    return DeploymentConfig(
        classes=list(classifier.classes),
        accuracy=accuracy,
        quant=quant,
        layout=layout,
        models=models,
        model_switch=switch,
        thr_c_q=certainty_threshold_code(classifier.thr_c),
        limits=limits,
        memory=memory,
        run_config=run_config or {},
    )


def _entry_to_record(entry: TableEntry) -> TableEntryRecord:
    return TableEntryRecord(
        node=entry.node,
        prev_result=entry.prev_result,
        kind=entry.kind,
        next_node=entry.next_node,
        feature=entry.feature,
        threshold_q=entry.threshold_q,
        leaf_node=entry.leaf_node,
        label=entry.label,
        certainty_q=entry.certainty_q,
    )


def _entry_from_record(record: TableEntryRecord) -> TableEntry:
    return TableEntry(
        node=record.node,
        prev_result=record.prev_result,
        kind=record.kind,
        next_node=record.next_node,
        feature=record.feature,
        threshold_q=record.threshold_q,
        leaf_node=record.leaf_node,
        label=record.label,
        certainty_q=record.certainty_q,
    )


def memory_to_record(memory: MemoryReport) -> MemoryRecord:
    return MemoryRecord(
        base_bits=memory.base_bits,
        packet_count_bits=memory.packet_count_bits,
        feature_bits={f.value: w for f, w in memory.feature_bits.items()},
        row_bits=memory.row_bits,
        flows_per_10mb=memory.flows_per_10mb,
    )


def config_to_record(config: DeploymentConfig) -> DeploymentRecord:
    return DeploymentRecord(
        run_config=config.run_config,
        classes=config.classes,
        accuracy=config.accuracy,
        quant=[
            QuantSpecRecord(
                feature=s.feature,
                bits=s.bits,
                shift=s.shift,
                guard_bits=s.guard_bits,
                t_min=s.t_min,
                t_max=s.t_max,
            )
            for s in config.quant.values()
        ],
        layout=[
            LayoutFieldRecord(feature=f.feature, offset=f.offset, width=f.width)
            for f in config.layout.fields
        ],
        layout_width=config.layout.total,
        models=[
            CompiledModelRecord(
                features=m.features,
                depth=m.depth,
                trees=[[[_entry_to_record(e) for e in level] for level in tree] for tree in m.trees],
            )
            for m in config.models
        ],
        model_switch=[
            SwitchRangeRecord(min_count=r.min_count, max_count=r.max_count, model=r.model)
            for r in config.model_switch
        ],
        thr_c_q=config.thr_c_q,
        max_trees=config.limits.max_trees,
        max_depth=config.limits.max_depth,
        stages=config.limits.stages,
        memory=memory_to_record(config.memory),
    )


def config_from_record(record: DeploymentRecord) -> DeploymentConfig:
    """Rebuild a config, rejecting internally inconsistent records."""
    quant = {
        q.feature: QuantSpec(q.feature, q.bits, q.shift, q.t_min, q.t_max, q.guard_bits)
        for q in sorted(record.quant, key=lambda q: q.feature.index)
    }
    layout = BitLayout([LayoutField(f.feature, f.offset, f.width) for f in record.layout])
    if layout.total != record.layout_width:
        raise MalformedConfigError(
            f"Layout fields cover {layout.total} bits, header says {record.layout_width}"
        )
    models = [
        CompiledModel(
            features=list(m.features),
            depth=m.depth,
            trees=[[[_entry_from_record(e) for e in level] for level in tree] for tree in m.trees],
        )
        for m in record.models
    ]
    for m in models:
        for tree in m.trees:
            if len(tree) != m.levels:
                raise MalformedConfigError(
                    f"Tree has {len(tree)} levels, model depth {m.depth} needs {m.levels}"
                )
            for level in tree:
                for e in level:
                    if e.feature is not None and e.feature not in quant:
                        raise MalformedConfigError(f"No quantization for {e.feature.value}")
    for r in record.model_switch:
        if r.model >= len(models):
            raise MalformedConfigError(f"Model switch refers to missing model {r.model}")
    return DeploymentConfig(
        classes=list(record.classes),
        accuracy=record.accuracy,
        quant=quant,
        layout=layout,
        models=models,
        model_switch=[SwitchRange(r.min_count, r.max_count, r.model) for r in record.model_switch],
        thr_c_q=record.thr_c_q,
        limits=HardwareLimits(record.max_trees, record.max_depth, record.stages),
        memory=MemoryReport(
            base_bits=record.memory.base_bits,
            packet_count_bits=record.memory.packet_count_bits,
            feature_bits={FeatureId(k): v for k, v in record.memory.feature_bits.items()},
            row_bits=record.memory.row_bits,
            flows_per_10mb=record.memory.flows_per_10mb,
        ),
        run_config=dict(record.run_config),
    )


def serialize_config(config: DeploymentConfig) -> bytes:
    """Canonical JSON bytes of ``config``."""
    return dumps_canonical(config_to_record(config))


def load_config(raw: bytes) -> DeploymentConfig:
    """Parse a deployment config; raises ``MalformedConfigError``."""
    return config_from_record(loads_record(raw, DeploymentRecord))


def dump_rows(config: DeploymentConfig) -> list[tuple[str, ...]]:
    """One row per table entry: model, tree, level, key and action."""
    rows = []
    for m, model in enumerate(config.models):
        for t, tree in enumerate(model.trees):
            for level, entries in enumerate(tree):
                for e in entries:
                    if e.kind is ActionKind.INTERNAL:
                        assert e.feature is not None
                        action = f"goto {e.next_node}: {e.feature.value} > {e.threshold_q}"
                    else:
                        label = config.classes[e.label] if e.label is not None else "?"
                        action = f"leaf {e.leaf_node}: {label} ({e.certainty_q})"
                    rows.append(
                        (str(m), str(t), str(level), f"({e.node}, {e.prev_result})", action)
                    )
    return rows
