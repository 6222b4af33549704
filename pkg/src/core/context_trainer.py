"""Greedy extraction of context-dependent random forests.

A context is a packet count ``p``: the feature snapshot of every flow's first
``p`` packets. The trainer walks contexts in ascending order, searches a
forest where the current one stops scoring above ``thr_s``, reuses an earlier
forest when one still scores above it, and otherwise searches a new one.
"""

from __future__ import annotations

import logging
import re
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.core.exceptions import EmptyContextError, NoModelFoundError
from src.core.feature_analysis import (
    FeatureGroups,
    dbscan_cluster,
    distances_as_rows,
    groups_as_names,
    mi_distance_matrix,
    select_representatives,
    weight_schedule,
)
from src.core.features import (
    FeatureId,
    FeatureMatrix,
    extract_contexts,
    extract_full,
)
from src.core.forest import (
    ForestParams,
    RandomForest,
    default_grid,
    f1_macro,
    forest_from_record,
    forest_to_record,
    grid_search,
    mdi_importance,
    predict_labels,
    predict_matrix,
    select_min_features,
)
from src.core.models import (
    ClassifierRecord,
    ContextEvaluationRecord,
    ContextModelRecord,
    EvaluationRecord,
    ReportAction,
    ReportEntryRecord,
    TrainingReportRecord,
)
from src.core.settings import RunConfig
from src.core.traffic import LabeledDataset

logger = logging.getLogger(__name__)

CONTEXT_FILE_PATTERN = re.compile(r"^features_p(\d+)\.csv$")
FULL_FEATURES_FILE = "features_full.csv"


def context_file_name(packet_count: int) -> str:
    return f"features_p{packet_count:03d}.csv"


@dataclass
class ContextDataset:
    """Per-context feature matrices plus completed-flow features."""

    contexts: dict[int, FeatureMatrix]
    full: FeatureMatrix
    classes: list[str]

    @classmethod
    def from_labeled(
        cls, dataset: LabeledDataset, packet_counts: Sequence[int]
    ) -> ContextDataset:
        """Extract every context from packet-level flows.

        Contexts that no flow reaches are left out.
        """
        matrices = extract_contexts(dataset, packet_counts)
        contexts = {p: m for p, m in matrices.items() if len(m) > 0}
        for p in sorted(set(matrices) - set(contexts)):
            logger.warning(f"No flow reaches {p} packets; context dropped")
        return cls(contexts, extract_full(dataset), list(dataset.classes))

    @classmethod
    def from_matrices(
        cls,
        contexts: dict[int, FeatureMatrix],
        full: FeatureMatrix | None = None,
    ) -> ContextDataset:
        """Wrap feature-level data; the last context stands in for full flows."""
        kept = {p: m for p, m in sorted(contexts.items()) if len(m) > 0}
        if not kept:
            raise EmptyContextError("Every context is empty")
        if full is None:
            full = kept[max(kept)]
        classes = sorted({str(v) for m in kept.values() for v in m.labels})
        return cls(kept, full, classes)

    @classmethod
    def read_dir(cls, directory: Path) -> ContextDataset:
        """Load ``features_pNNN.csv`` files (and ``features_full.csv`` if present)."""
        contexts: dict[int, FeatureMatrix] = {}
        for path in sorted(Path(directory).iterdir()):
            match = CONTEXT_FILE_PATTERN.match(path.name)
            if match:
                contexts[int(match.group(1))] = FeatureMatrix.read_csv(path)
        full_path = Path(directory) / FULL_FEATURES_FILE
        full = FeatureMatrix.read_csv(full_path) if full_path.exists() else None
        logger.info(f"Loaded {len(contexts)} context matrices from {directory}")
        return cls.from_matrices(contexts, full)

    def write_dir(self, directory: Path) -> list[Path]:
        paths = []
        for p, matrix in self.contexts.items():
            path = Path(directory) / context_file_name(p)
            matrix.to_csv(path)
            paths.append(path)
        full_path = Path(directory) / FULL_FEATURES_FILE
        self.full.to_csv(full_path)
        paths.append(full_path)
        return paths


@dataclass
class ContextModel:
    """A forest active from ``activation_count`` packets on."""

    activation_count: int
    forest: RandomForest
    features: list[FeatureId]
    score_at_extraction: float
    reused_from: int | None = None


@dataclass
class Classifier:
    """Context models ordered by strictly increasing activation count."""

    models: list[ContextModel]
    thr_s: float
    thr_c: float
    classes: list[str]

    def model_for(self, packet_count: int) -> tuple[int, ContextModel] | None:
        """Most recent model whose activation count is at most ``packet_count``."""
        found: tuple[int, ContextModel] | None = None
        for i, model in enumerate(self.models):
            if model.activation_count <= packet_count:
                found = (i, model)
        return found

    def forests(self) -> list[RandomForest]:
        """Distinct forests in order of first use."""
        seen: list[RandomForest] = []
        for model in self.models:
            if not any(model.forest is f for f in seen):
                seen.append(model.forest)
        return seen


@dataclass
class TrainerConfig:
    """Knobs of the greedy trainer."""

    grid: list[ForestParams] = field(default_factory=lambda: [ForestParams()])
    horizon: int = 10
    eps: float = 0.3
    min_pts: int = 1
    bins: int = 64
    cv_folds: int = 6

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> TrainerConfig:
        return cls(
            grid=default_grid(
                cfg.grid_n_trees, cfg.grid_max_depth, cfg.grid_class_weights, cfg.seed
            ),
            horizon=cfg.max_models,
            eps=cfg.dbscan_eps,
            min_pts=cfg.dbscan_min_pts,
            bins=cfg.mi_bins,
            cv_folds=cfg.cv_folds,
        )


@dataclass
class ReportEntry:
    packet_count: int
    action: ReportAction
    model_index: int | None = None
    features: list[FeatureId] = field(default_factory=list)
    cv_score: float | None = None
    score: float | None = None
    weights: tuple[float, float, float] | None = None
    note: str = ""


@dataclass
class TrainingReport:
    """Log of every analysis step, for inspection and plotting."""

    groups: FeatureGroups = field(default_factory=lambda: FeatureGroups([]))
    distances: list[dict[str, float | str]] = field(default_factory=list)
    entries: list[ReportEntry] = field(default_factory=list)

    def add(self, entry: ReportEntry) -> None:
        self.entries.append(entry)
        logger.info(
            f"p={entry.packet_count}: {entry.action.value}"
            + (f" score={entry.score:.4f}" if entry.score is not None else "")
            + (f" cv={entry.cv_score:.4f}" if entry.cv_score is not None else "")
        )

    def to_record(self, run_config: dict[str, Any] | None = None) -> TrainingReportRecord:
        return TrainingReportRecord(
            run_config=run_config or {},
            groups=self.groups.groups,
            distances=self.distances,
            entries=[
                ReportEntryRecord(
                    packet_count=e.packet_count,
                    action=e.action,
                    model_index=e.model_index,
                    features=e.features,
                    cv_score=e.cv_score,
                    score=e.score,
                    w_m=e.weights[0] if e.weights else None,
                    w_c=e.weights[1] if e.weights else None,
                    w_d=e.weights[2] if e.weights else None,
                    note=e.note,
                )
                for e in self.entries
            ],
        )

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "packet_count": e.packet_count,
                "action": e.action.value,
                "model_index": e.model_index,
                "features": "|".join(f.value for f in e.features),
                "cv_score": e.cv_score,
                "score": e.score,
            }
            for e in self.entries
        ]
        return pd.DataFrame(
            rows,
            columns=["packet_count", "action", "model_index", "features", "cv_score", "score"],
        )


def _trainable(matrix: FeatureMatrix) -> bool:
    _, counts = np.unique(matrix.labels.astype(str), return_counts=True)
    return counts.shape[0] >= 2 and int(counts.min()) >= 2


def score_on_context(
    forest: RandomForest, matrix: FeatureMatrix, classes: Sequence[str]
) -> float:
    """Training-set F1 of ``forest`` on a context; 0 if it reads undefined features."""
    defined = set(matrix.defined_features())
    if len(matrix) == 0 or not set(forest.features) <= defined:
        return 0.0
    predicted = predict_labels(forest, matrix.select(forest.features))
    return f1_macro(matrix.labels, predicted, classes)


def best_old_rf(
    extracted: Sequence[ContextModel], matrix: FeatureMatrix, classes: Sequence[str]
) -> tuple[ContextModel, float]:
    """Highest-scoring earlier model on this context; ties keep the earliest."""
    if not extracted:
        raise ValueError("No earlier model to choose from")
    best = extracted[0]
    best_score = score_on_context(best.forest, matrix, classes)
    for model in extracted[1:]:
        score = score_on_context(model.forest, matrix, classes)
        if score > best_score:
            best, best_score = model, score
    return best, best_score


def train_classifier(
    data: ContextDataset,
    packet_counts: Sequence[int],
    thr_s: float,
    config: TrainerConfig | None = None,
    thr_c: float = 0.0,
) -> tuple[Classifier, TrainingReport]:
    """Extract the sequence of context models.

    Model search requires a cross-validated score strictly above ``thr_s``;
    reapplication continues while the training score stays strictly above it.
    Raises ``NoModelFoundError`` (carrying the report) when no context yields
    a model.
    """
    config = config or TrainerConfig()
    classes = data.classes
    report = TrainingReport()

    distances = mi_distance_matrix(data.full, bins=config.bins)
    groups = dbscan_cluster(distances, eps=config.eps, min_pts=config.min_pts)
    report.groups = groups
    report.distances = distances_as_rows(distances)
    logger.info(f"Found {len(groups.groups)} feature groups")
    logger.debug(f"Feature groups: {groups_as_names(groups)}")

    pending: deque[int] = deque()
    for p in sorted(set(packet_counts)):
        if p in data.contexts:
            pending.append(p)
        else:
            report.add(ReportEntry(p, ReportAction.SKIPPED, note="no flow reaches this count"))

    models: list[ContextModel] = []
    extracted: list[ContextModel] = []
    used: set[FeatureId] = set()

    while pending:
        found = None
        while pending:
            p = pending.popleft()
            matrix = data.contexts[p]
            if not _trainable(matrix):
                report.add(ReportEntry(p, ReportAction.SKIPPED, note="a class has fewer than 2 flows"))
                continue
            weights = weight_schedule(len(models), config.horizon)
            candidates = groups.restrict(set(matrix.defined_features()))
            if not candidates.groups:
                report.add(ReportEntry(p, ReportAction.SKIPPED, note="no defined features"))
                continue
            reps = select_representatives(candidates, weights, used)
            forest, cv_score, params = grid_search(
                matrix.select(reps), matrix.labels, config.grid, reps, classes, config.cv_folds
            )
            report.add(
                ReportEntry(
                    p,
                    ReportAction.SEARCHED,
                    features=reps,
                    cv_score=cv_score,
                    weights=(weights.w_m, weights.w_c, weights.w_d),
                )
            )
            if cv_score > thr_s:
                found = (p, matrix, reps, forest, params, cv_score)
                break
        if found is None:
            break

        p, matrix, reps, forest, params, cv_score = found
        ranking = mdi_importance(forest)
        selection = select_min_features(
            matrix.select(reps), matrix.labels, params, ranking, thr_s, reps, classes, config.cv_folds
        )
        if selection.reached:
            current = ContextModel(p, selection.forest, selection.features, selection.score)
        else:
            logger.warning(
                f"p={p}: no feature prefix reached {thr_s} (best {selection.score:.4f}); "
                f"keeping the searched forest on all {len(reps)} representatives"
            )
            current = ContextModel(p, forest, reps, cv_score)
        models.append(current)
        extracted.append(current)
        used.update(current.features)
        report.add(
            ReportEntry(
                p,
                ReportAction.EXTRACTED,
                model_index=len(models) - 1,
                features=current.features,
                score=current.score_at_extraction,
                note="" if selection.reached else "minimal subset not reached",
            )
        )

        while pending:
            p = pending.popleft()
            matrix = data.contexts[p]
            score = score_on_context(current.forest, matrix, classes)
            if score > thr_s:
                report.add(
                    ReportEntry(p, ReportAction.REAPPLIED, model_index=len(models) - 1, score=score)
                )
                continue
            old, old_score = best_old_rf(extracted, matrix, classes)
            if old_score > thr_s:
                current = ContextModel(
                    p, old.forest, old.features, old_score, reused_from=models.index(old)
                )
                models.append(current)
                report.add(
                    ReportEntry(
                        p,
                        ReportAction.REUSED,
                        model_index=len(models) - 1,
                        features=old.features,
                        score=old_score,
                        note=f"reuses model {models.index(old)}",
                    )
                )
                continue
            pending.appendleft(p)
            report.add(
                ReportEntry(p, ReportAction.DROPPED, score=score, note=f"best earlier model scored {old_score:.4f}")
            )
            break

    if not models:
        raise NoModelFoundError(
            f"No context reached a cross-validated F1 above {thr_s}", report
        )
    logger.info(f"Extracted {len(extracted)} forests across {len(models)} context models")
    return Classifier(models, thr_s, thr_c, list(classes)), report


@dataclass
class ContextEvaluation:
    packet_count: int
    model_index: int | None
    attempted: int
    classified: int
    classified_pct: float
    cumulative_classified_pct: float
    cumulative_f1: float | None


@dataclass
class EvaluationSummary:
    """How many flows the classifier labels, when, and how well."""

    thr_c: float
    total_flows: int
    classified_flows: int
    too_short_pct: float
    f1_classified: float | None
    contexts: list[ContextEvaluation]
    short_flows_classified: int = 0

    @property
    def classified_pct(self) -> float:
        return 100.0 * self.classified_flows / self.total_flows if self.total_flows else 0.0

    def to_record(self, run_config: dict[str, Any] | None = None) -> EvaluationRecord:
        return EvaluationRecord(
            run_config=run_config or {},
            thr_c=self.thr_c,
            total_flows=self.total_flows,
            classified_flows=self.classified_flows,
            classified_pct=self.classified_pct,
            too_short_pct=self.too_short_pct,
            f1_classified=self.f1_classified,
            short_flows_classified=self.short_flows_classified,
            contexts=[ContextEvaluationRecord(**vars(c)) for c in self.contexts],
        )


def _unique(ids: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(ids))


def evaluate_classifier(
    classifier: Classifier,
    data: ContextDataset,
    thr_c: float,
    classify_short_flows: bool = False,
) -> EvaluationSummary:
    """Replay the acceptance rule over the contexts in ascending order.

    At every context with an active model, flows not yet classified are
    predicted; a prediction is accepted when its certainty is at least
    ``thr_c``.
    """
    all_ids = _unique(
        [*data.full.flow_ids, *(i for m in data.contexts.values() for i in m.flow_ids)]
    )
    total = len(all_ids)
    decided: dict[str, tuple[str, str]] = {}
    results: list[ContextEvaluation] = []

    for p in sorted(data.contexts):
        matrix = data.contexts[p]
        active = classifier.model_for(p)
        if active is None:
            results.append(
                ContextEvaluation(p, None, 0, 0, 0.0, _pct(len(decided), total), _f1(decided, classifier))
            )
            continue
        index, model = active
        rows = [
            i for i, fid in enumerate(matrix.flow_ids) if fid not in decided
        ]
        X = matrix.select(model.features)[rows] if rows else np.empty((0, len(model.features)))
        defined = ~np.isnan(X).any(axis=1) if len(rows) else np.zeros(0, dtype=bool)
        rows = [r for r, ok in zip(rows, defined, strict=True) if ok]
        X = X[defined]
        accepted = 0
        if rows:
            winner, certainty = predict_matrix(model.forest, X)
            for r, w, c in zip(rows, winner, certainty, strict=True):
                if c >= thr_c:
                    decided[matrix.flow_ids[r]] = (
                        str(matrix.labels[r]),
                        classifier.classes[int(w)] if classifier.classes else model.forest.classes[int(w)],
                    )
                    accepted += 1
        results.append(
            ContextEvaluation(
                packet_count=p,
                model_index=index,
                attempted=len(rows),
                classified=accepted,
                classified_pct=_pct(accepted, total),
                cumulative_classified_pct=_pct(len(decided), total),
                cumulative_f1=_f1(decided, classifier),
            )
        )

    first = classifier.models[0].activation_count if classifier.models else None
    reaching = set(data.contexts[first].flow_ids) if first in data.contexts else set()
    short = [fid for fid in all_ids if fid not in reaching]
    short_classified = 0
    if classify_short_flows and short and classifier.models:
        short_classified = _classify_short(classifier, data.full, set(short), thr_c, decided)

    return EvaluationSummary(
        thr_c=thr_c,
        total_flows=total,
        classified_flows=len(decided),
        too_short_pct=_pct(len(short), total),
        f1_classified=_f1(decided, classifier),
        contexts=results,
        short_flows_classified=short_classified,
    )


def _classify_short(
    classifier: Classifier,
    full: FeatureMatrix,
    short: set[str],
    thr_c: float,
    decided: dict[str, tuple[str, str]],
) -> int:
    """Label ended short flows with the earliest model on their completed features."""
    model = classifier.models[0]
    rows = [i for i, fid in enumerate(full.flow_ids) if fid in short and fid not in decided]
    if not rows or not set(model.features) <= set(full.features):
        return 0
    X = full.select(model.features)[rows]
    defined = ~np.isnan(X).any(axis=1)
    rows = [r for r, ok in zip(rows, defined, strict=True) if ok]
    if not rows:
        return 0
    winner, certainty = predict_matrix(model.forest, X[defined])
    count = 0
    for r, w, c in zip(rows, winner, certainty, strict=True):
        if c >= thr_c:
            decided[full.flow_ids[r]] = (str(full.labels[r]), model.forest.classes[int(w)])
            count += 1
    return count


def _pct(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


def _f1(decided: dict[str, tuple[str, str]], classifier: Classifier) -> float | None:
    if not decided:
        return None
    truth = [t for t, _ in decided.values()]
    predicted = [p for _, p in decided.values()]
    return f1_macro(truth, predicted, classifier.classes)


def classifier_to_record(
    classifier: Classifier, run_config: dict[str, Any] | None = None
) -> ClassifierRecord:
    """Serializable classifier; reused forests are stored once."""
    forests = classifier.forests()
    records = []
    for model in classifier.models:
        index = next(i for i, f in enumerate(forests) if f is model.forest)
        records.append(
            ContextModelRecord(
                activation_count=model.activation_count,
                forest_index=index,
                features=model.features,
                score_at_extraction=min(1.0, max(0.0, model.score_at_extraction)),
                reused_from=model.reused_from,
            )
        )
    return ClassifierRecord(
        run_config=run_config or {},
        classes=classifier.classes,
        thr_s=classifier.thr_s,
        thr_c=classifier.thr_c,
        forests=[forest_to_record(f) for f in forests],
        models=records,
    )


def classifier_from_record(record: ClassifierRecord) -> Classifier:
    """Rebuild a classifier, sharing forests between reusing models."""
    forests = [forest_from_record(f) for f in record.forests]
    models = [
        ContextModel(
            activation_count=m.activation_count,
            forest=forests[m.forest_index],
            features=list(m.features),
            score_at_extraction=m.score_at_extraction,
            reused_from=m.reused_from,
        )
        for m in record.models
    ]
    return Classifier(models, record.thr_s, record.thr_c, list(record.classes))
