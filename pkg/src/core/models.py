"""Pydantic records for every JSON artifact the pipeline reads or writes.

Domain logic works on the dataclasses of each core module; these models only
validate and serialize.
"""

from __future__ import annotations

from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from src.core.features import FeatureId

SCHEMA_VERSION = 1


class ActionKind(str, Enum):
    """Kinds of table actions."""

    INTERNAL = "internal"
    LEAF = "leaf"


class ReportAction(str, Enum):
    """What the trainer did at one packet count."""

    SEARCHED = "searched"
    EXTRACTED = "extracted"
    REAPPLIED = "reapplied"
    REUSED = "reused"
    DROPPED = "dropped"
    SKIPPED = "skipped"


class ArtifactRecord(BaseModel):
    """Fields every artifact carries for provenance."""

    schema_version: int = Field(SCHEMA_VERSION, description="Artifact schema version")
    run_config: dict[str, Any] = Field(
        default_factory=dict, description="Validated run configuration"
    )

    @field_validator("schema_version")
    @classmethod
    def supported_version(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"Unsupported schema version {v}")
        return v


# Forests and classifiers


class NodeRecord(BaseModel):
    """Tree node; internal when ``feature`` is set."""

    label: int = Field(..., ge=0, description="Majority class index")
    certainty: float = Field(..., ge=0.0, le=1.0)
    support: int = Field(..., ge=0)
    impurity: float = 0.0
    weight: float = 0.0
    feature: FeatureId | None = None
    threshold: float | None = None
    left: NodeRecord | None = None
    right: NodeRecord | None = None

    @model_validator(mode="after")
    def children_match_kind(self) -> NodeRecord:
        internal = self.feature is not None
        complete = (
            self.threshold is not None
            and self.left is not None
            and self.right is not None
        )
        if internal and not complete:
            raise ValueError("Internal node needs threshold and both children")
        if not internal and (self.left is not None or self.right is not None):
            raise ValueError("Leaf node cannot have children")
        return self


class ForestParamsRecord(BaseModel):
    n_trees: int = Field(..., ge=1)
    max_depth: int | None = Field(None, ge=0)
    class_weight_mode: str = "uniform"
    class_weights: dict[str, float] | None = None
    features_per_split: int | None = Field(None, ge=1)
    bootstrap: bool = True
    seed: int = Field(0, ge=0)


class ForestRecord(BaseModel):
    classes: list[str] = Field(..., min_length=1)
    features: list[FeatureId]
    params: ForestParamsRecord
    trees: list[NodeRecord] = Field(..., min_length=1)


class ContextModelRecord(BaseModel):
    activation_count: int = Field(..., ge=1)
    forest_index: int = Field(..., ge=0, description="Index into the forest list")
    features: list[FeatureId]
    score_at_extraction: float = Field(..., ge=0.0, le=1.0)
    reused_from: int | None = Field(
        None, description="Index of the model whose forest is reused"
    )


class ClassifierRecord(ArtifactRecord):
    kind: Literal["classifier"] = "classifier"
    classes: list[str] = Field(..., min_length=1)
    thr_s: float = Field(..., ge=0.0)
    thr_c: float = Field(..., ge=0.0)
    forests: list[ForestRecord]
    models: list[ContextModelRecord]

    @model_validator(mode="after")
    def consistent_models(self) -> ClassifierRecord:
        counts = [m.activation_count for m in self.models]
        if counts != sorted(set(counts)):
            raise ValueError("Activation counts must be strictly increasing")
        for m in self.models:
            if m.forest_index >= len(self.forests):
                raise ValueError(f"Model refers to missing forest {m.forest_index}")
        return self


# Training report and evaluation


class ReportEntryRecord(BaseModel):
    packet_count: int
    action: ReportAction
    model_index: int | None = None
    features: list[FeatureId] = Field(default_factory=list)
    cv_score: float | None = None
    score: float | None = None
    w_m: float | None = None
    w_c: float | None = None
    w_d: float | None = None
    note: str = ""


class TrainingReportRecord(ArtifactRecord):
    kind: Literal["training_report"] = "training_report"
    groups: list[list[FeatureId]] = Field(default_factory=list)
    distances: list[dict[str, float | str]] = Field(default_factory=list)
    entries: list[ReportEntryRecord] = Field(default_factory=list)


class ContextEvaluationRecord(BaseModel):
    packet_count: int
    model_index: int | None
    attempted: int
    classified: int
    classified_pct: float
    cumulative_classified_pct: float
    cumulative_f1: float | None


class EvaluationRecord(ArtifactRecord):
    kind: Literal["evaluation"] = "evaluation"
    thr_c: float
    total_flows: int
    classified_flows: int
    classified_pct: float
    too_short_pct: float
    f1_classified: float | None
    short_flows_classified: int = 0
    contexts: list[ContextEvaluationRecord]


# Deployment configuration


class QuantSpecRecord(BaseModel):
    feature: FeatureId
    bits: int = Field(..., ge=1)
    shift: int
    guard_bits: int = Field(0, ge=0)
    t_min: float
    t_max: float


class LayoutFieldRecord(BaseModel):
    feature: FeatureId
    offset: int = Field(..., ge=0)
    width: int = Field(..., ge=1)


class TableEntryRecord(BaseModel):
    node: int = Field(..., ge=0, description="Key: previous node id")
    prev_result: bool = Field(..., description="Key: previous comparison result")
    kind: ActionKind
    next_node: int | None = None
    feature: FeatureId | None = None
    threshold_q: int | None = None
    leaf_node: int | None = None
    label: int | None = None
    certainty_q: int | None = Field(None, ge=0, le=255)

    @model_validator(mode="after")
    def action_fields(self) -> TableEntryRecord:
        if self.kind is ActionKind.INTERNAL:
            if self.next_node is None or self.feature is None or self.threshold_q is None:
                raise ValueError("Internal action needs next_node, feature and threshold_q")
        elif self.leaf_node is None or self.label is None or self.certainty_q is None:
            raise ValueError("Leaf action needs leaf_node, label and certainty_q")
        return self


class CompiledModelRecord(BaseModel):
    features: list[FeatureId]
    depth: int = Field(..., ge=0)
    trees: list[list[list[TableEntryRecord]]] = Field(
        ..., min_length=1, description="Tree -> level -> entries"
    )


class SwitchRangeRecord(BaseModel):
    min_count: int = Field(..., ge=1)
    max_count: int = Field(..., ge=1)
    model: int = Field(..., ge=0)


class MemoryRecord(BaseModel):
    base_bits: int
    packet_count_bits: int
    feature_bits: dict[str, int]
    row_bits: int
    flows_per_10mb: int


class DeploymentRecord(ArtifactRecord):
    kind: Literal["deployment"] = "deployment"
    classes: list[str] = Field(..., min_length=1)
    accuracy: float = Field(..., gt=0.0)
    quant: list[QuantSpecRecord]
    layout: list[LayoutFieldRecord]
    layout_width: int = Field(..., ge=0)
    models: list[CompiledModelRecord]
    model_switch: list[SwitchRangeRecord]
    thr_c_q: int = Field(..., ge=0)
    max_trees: int = Field(..., ge=1)
    max_depth: int = Field(..., ge=0)
    stages: int = Field(..., ge=1)
    memory: MemoryRecord


# Simulation


class CountStatRecord(BaseModel):
    packet_count: int
    classified: int
    classified_pct: float
    cumulative_classified_pct: float
    cumulative_f1: float | None


class SimulationStatsRecord(ArtifactRecord):
    kind: Literal["simulation"] = "simulation"
    packets: int = 0
    flows: int = 0
    classified_flows: int = 0
    classified_pct: float = 0.0
    f1_classified: float | None = None
    collisions: int = 0
    table_full: int = 0
    evicted: int = 0
    hash_hits: int = 0
    no_model_yet: int = 0
    low_certainty: int = 0
    rows: int = 0
    register_bits: int = 0
    memory: MemoryRecord | None = None
    per_count: list[CountStatRecord] = Field(default_factory=list)


class ExtractSummaryRecord(ArtifactRecord):
    kind: Literal["extract_summary"] = "extract_summary"
    packets: int
    skipped_packets: int
    flows: int
    labeled_flows: int
    contexts: dict[str, int] = Field(
        default_factory=dict, description="Packet count -> rows written"
    )
    short_flows: dict[str, int] = Field(
        default_factory=dict, description="Packet count -> flows too short"
    )


NodeRecord.model_rebuild()
