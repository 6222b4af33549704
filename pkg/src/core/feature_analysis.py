"""Redundant feature grouping and representative selection.

Features are compared with a normalized mutual-information distance,
clustered with DBSCAN, and each cluster contributes the member with the best
memory / convergence / reuse trade-off.
"""

from __future__ import annotations

import logging
from collections.abc import Collection
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import DBSCAN

from src.core.exceptions import InsufficientSamplesError
from src.core.features import (
    DEFINED_FROM,
    NATIVE_WIDTH,
    FeatureId,
    FeatureKind,
    FeatureMatrix,
    sort_features,
)

logger = logging.getLogger(__name__)

DEFAULT_BINS = 64
EWMA_GUARD_BITS = 2
COUNTER_BITS = 7


@dataclass
class DistanceMatrix:
    """Symmetric distances in [0, 1] over ``features``."""

    features: list[FeatureId]
    values: np.ndarray

    def distance(self, a: FeatureId, b: FeatureId) -> float:
        return float(self.values[self.features.index(a), self.features.index(b)])


@dataclass
class FeatureGroups:
    """Disjoint clusters of redundant features."""

    groups: list[list[FeatureId]]

    def restrict(self, allowed: Collection[FeatureId]) -> FeatureGroups:
        """Drop features outside ``allowed`` and any group left empty."""
        kept = [[f for f in g if f in allowed] for g in self.groups]
        return FeatureGroups([g for g in kept if g])


@dataclass(frozen=True)
class TradeoffWeights:
    """Weights for memory, convergence and reuse at a model index."""

    w_m: float
    w_c: float
    w_d: float
    model_index: int


@dataclass(frozen=True)
class TradeoffMetrics:
    """Raw cost of one feature: memory bits, packets to converge, novelty."""

    m_m: int
    m_c: int
    m_d: int


def _discretize(column: np.ndarray, bins: int) -> np.ndarray:
    lo = column.min()
    hi = column.max()
    if hi == lo:
        return np.zeros(column.shape[0], dtype=np.int64)
    codes = np.floor((column - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(codes, bins - 1)


def _entropy(codes: np.ndarray) -> float:
    _, counts = np.unique(codes, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mi_distance_matrix(matrix: FeatureMatrix, bins: int = DEFAULT_BINS) -> DistanceMatrix:
    """Pairwise ``1 - I(X;Y) / H(X,Y)`` over the features defined on every row.

    Entropies are plug-in estimates over equal-width bins spanning each
    column's observed range. Constant columns are at distance 1 from every
    other feature.
    """
    if len(matrix) < 2:
        raise InsufficientSamplesError(
            f"Mutual information needs at least 2 rows, got {len(matrix)}"
        )
    features = matrix.defined_features()
    codes = [_discretize(col, bins) for col in matrix.select(features).T]
    marginal = [_entropy(c) for c in codes]

    n = len(features)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            joint = _entropy(codes[i] * bins + codes[j])
            if joint == 0.0:
                d = 1.0
            else:
                mutual = marginal[i] + marginal[j] - joint
                d = 1.0 - mutual / joint
            values[i, j] = values[j, i] = min(1.0, max(0.0, d))
    logger.debug(f"Computed MI distances over {n} features and {len(matrix)} rows")
    return DistanceMatrix(features, values)


def dbscan_cluster(d: DistanceMatrix, eps: float = 0.3, min_pts: int = 1) -> FeatureGroups:
    """Cluster features with DBSCAN on the precomputed distances.

    Noise points become singleton groups; groups are ordered by their first
    member.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be at least 1, got {min_pts}")
    if not d.features:
        return FeatureGroups([])

    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit(
        d.values
    ).labels_

    clusters: dict[int, list[FeatureId]] = {}
    singletons: list[list[FeatureId]] = []
    for feature, label in zip(d.features, labels, strict=True):
        if label < 0:
            singletons.append([feature])
        else:
            clusters.setdefault(int(label), []).append(feature)

    groups = [sort_features(g) for g in [*clusters.values(), *singletons]]
    groups.sort(key=lambda g: g[0].index)
    return FeatureGroups(groups)


def planning_bits(feature: FeatureId) -> int:
    """Register width assumed when planning which feature to store."""
    return NATIVE_WIDTH[feature]


def tradeoff_metrics(
    feature: FeatureId, bits_if_stored: int, previously_used: bool
) -> TradeoffMetrics:
    """Memory, convergence and reuse cost of one feature."""
    kind = feature.kind
    if kind is FeatureKind.STATELESS:
        m_m = 0
    elif kind is FeatureKind.EWMA:
        m_m = bits_if_stored + EWMA_GUARD_BITS
    elif kind is FeatureKind.COUNTER:
        m_m = COUNTER_BITS
    else:
        m_m = bits_if_stored

    if kind is FeatureKind.STATELESS:
        m_c = 1
    elif feature is FeatureId.IAT_AVG:
        m_c = 3
    elif feature is FeatureId.LEN_AVG:
        m_c = 2
    else:
        m_c = DEFINED_FROM[feature]

    return TradeoffMetrics(m_m=m_m, m_c=m_c, m_d=0 if previously_used else 1)


def _normalize(raw: np.ndarray) -> np.ndarray:
    span = raw.max() - raw.min()
    if span == 0:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - raw.min()) / span


def select_representatives(
    groups: FeatureGroups,
    weights: TradeoffWeights,
    used_features: Collection[FeatureId],
) -> list[FeatureId]:
    """Pick the cheapest member of every group, returned in feature order.

    Metrics are min-max normalized within each group before weighting; ties go
    to the lower feature index.
    """
    if not groups.groups:
        raise ValueError("Cannot select representatives from no groups")

    chosen: list[FeatureId] = []
    for group in groups.groups:
        members = sort_features(group)
        metrics = [
            tradeoff_metrics(f, planning_bits(f), f in used_features) for f in members
        ]
        m_m = _normalize(np.array([m.m_m for m in metrics], dtype=np.float64))
        m_c = _normalize(np.array([m.m_c for m in metrics], dtype=np.float64))
        m_d = _normalize(np.array([m.m_d for m in metrics], dtype=np.float64))
        scores = weights.w_m * m_m + weights.w_c * m_c + weights.w_d * m_d
        # argmin returns the first minimum, i.e. the lowest feature index
        chosen.append(members[int(np.argmin(scores))])
    return sort_features(chosen)


def weight_schedule(model_index: int, horizon: int) -> TradeoffWeights:
    """Weights decaying linearly from (1, 1, 0.5) to zero at ``horizon``."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    scale = max(0.0, 1.0 - model_index / horizon)
    return TradeoffWeights(
        w_m=scale, w_c=scale, w_d=0.5 * scale, model_index=model_index
    )


def groups_as_names(groups: FeatureGroups) -> list[list[str]]:
    """Groups rendered with feature names for reports."""
    return [[f.value for f in g] for g in groups.groups]


def distances_as_rows(d: DistanceMatrix) -> list[dict[str, float | str]]:
    """Distance matrix flattened for debug dumps."""
    rows: list[dict[str, float | str]] = []
    for i, a in enumerate(d.features):
        for j, b in enumerate(d.features):
            if i < j:
                rows.append({"a": a.value, "b": b.value, "distance": float(d.values[i, j])})
    return rows
