"""Random forests of CART trees with per-leaf certainty.

Trees split on weighted Gini impurity. A sample goes left when its value is
less than or equal to the threshold and right when it is strictly greater,
which is the comparison the compiled tables perform.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.metrics import f1_score
from sklearn.model_selection import StratifiedKFold

from src.core.exceptions import (
    EmptyInputError,
    LengthMismatchError,
    TooFewSamplesError,
    UndefinedFeatureError,
)
from src.core.features import FeatureId, FeatureVector, sort_features
from src.core.models import ForestParamsRecord, ForestRecord, NodeRecord

logger = logging.getLogger(__name__)


class ClassWeightMode(str, Enum):
    """How class weights are derived from the training labels."""

    UNIFORM = "uniform"
    BALANCED = "balanced"


@dataclass
class ForestParams:
    """Hyper-parameters of one forest.

    ``max_depth=None`` grows trees until leaves are pure.
    ``features_per_split=None`` means ``ceil(sqrt(#features))``.
    ``class_weights`` overrides ``class_weight_mode`` when given.
    """

    n_trees: int = 10
    max_depth: int | None = 10
    class_weight_mode: ClassWeightMode = ClassWeightMode.UNIFORM
    class_weights: dict[str, float] | None = None
    features_per_split: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.class_weights and any(w <= 0 for w in self.class_weights.values()):
            raise ValueError("class weights must be positive")
        self.class_weight_mode = ClassWeightMode(self.class_weight_mode)


@dataclass
class TreeNode:
    """Internal node when ``feature`` is set, leaf otherwise.

    Every node carries the weighted majority ``label`` (a class index), its
    ``certainty``, the number of training samples it saw and its weighted
    impurity statistics for importance computation.
    """

    label: int
    certainty: float
    support: int
    impurity: float = 0.0
    weight: float = 0.0
    feature: FeatureId | None = None
    threshold: float | None = None
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        assert self.left is not None and self.right is not None
        return 1 + max(self.left.depth(), self.right.depth())


@dataclass
class DecisionTree:
    root: TreeNode

    @property
    def depth(self) -> int:
        return self.root.depth()

    def walk(self, values: dict[FeatureId, float]) -> TreeNode:
        """Leaf reached by a single sample."""
        node = self.root
        while not node.is_leaf:
            assert node.feature is not None and node.threshold is not None
            nxt = node.right if values[node.feature] > node.threshold else node.left
            assert nxt is not None
            node = nxt
        return node


@dataclass
class RandomForest:
    """Trees trained on the columns ``features`` to predict ``classes``."""

    trees: list[DecisionTree]
    classes: list[str]
    features: list[FeatureId]
    params: ForestParams = field(default_factory=ForestParams)

    @property
    def depth(self) -> int:
        return max((t.depth for t in self.trees), default=0)


@dataclass
class FeatureSelection:
    """Outcome of minimal feature selection."""

    features: list[FeatureId]
    forest: RandomForest
    score: float
    reached: bool


def resolve_class_weights(
    params: ForestParams, y: np.ndarray, n_classes: int, classes: Sequence[str]
) -> np.ndarray:
    """Per-class weight vector indexed by class index."""
    if params.class_weights:
        return np.array([params.class_weights.get(c, 1.0) for c in classes])
    if params.class_weight_mode is ClassWeightMode.BALANCED:
        counts = np.bincount(y, minlength=n_classes).astype(np.float64)
        present = counts > 0
        weights = np.ones(n_classes)
        weights[present] = len(y) / (present.sum() * counts[present])
        return weights
    return np.ones(n_classes)


def _leaf_stats(class_w: np.ndarray) -> tuple[int, float, float, float]:
    total = float(class_w.sum())
    label = int(np.argmax(class_w))
    certainty = float(class_w[label] / total)
    gini = 1.0 - float(((class_w / total) ** 2).sum())
    return label, certainty, gini, total


def _best_split(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    class_w: np.ndarray,
    candidates: np.ndarray,
    features_per_split: int,
) -> tuple[int, float] | None:
    """Best (column, threshold) among the sampled columns.

    Columns are examined in ``candidates`` order; once ``features_per_split``
    columns have been examined the search stops as soon as a valid split
    exists, so unsplittable samples fall back to further columns.
    """
    n_classes = class_w.shape[0]
    total = class_w.sum()
    best: tuple[float, int, float] | None = None
    examined = 0
    for col in candidates:
        if examined >= features_per_split and best is not None:
            break
        examined += 1
        x = X[:, col]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue

        weighted = np.zeros((x.shape[0], n_classes))
        weighted[np.arange(x.shape[0]), y[order]] = w[order]
        left = np.cumsum(weighted, axis=0)[:-1][valid]
        right = class_w - left
        wl = left.sum(axis=1)
        wr = right.sum(axis=1)
        gini_l = 1.0 - ((left / wl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right / wr[:, None]) ** 2).sum(axis=1)
        impurity = (wl * gini_l + wr * gini_r) / total

        pos = int(np.argmin(impurity))
        positions = np.flatnonzero(valid)
        i = positions[pos]
        threshold = float((xs[i] + xs[i + 1]) / 2.0)
        if threshold >= xs[i + 1]:
            # adjacent floats: the midpoint rounds up to the larger value
            threshold = float(xs[i])
        if best is None or impurity[pos] < best[0]:
            best = (float(impurity[pos]), int(col), threshold)
    if best is None:
        return None
    return best[1], best[2]


def train_tree(
    X: np.ndarray,
    y: np.ndarray,
    sample_weights: np.ndarray,
    params: ForestParams,
    rng: np.random.Generator,
    features: Sequence[FeatureId],
    n_classes: int,
    multiplicity: np.ndarray | None = None,
) -> DecisionTree:
    """Grow one CART tree on ``X`` (columns ``features``) and class indices ``y``.

    Splits are midpoints between consecutive distinct values. Growth stops at
    ``max_depth``, at pure nodes and at nodes with fewer than two samples.
    """
    if X.shape[0] == 0:
        raise EmptyInputError("Cannot train a tree on zero samples")
    if np.isnan(X).any():
        raise UndefinedFeatureError("Training matrix contains undefined values")
    if multiplicity is None:
        multiplicity = np.ones(X.shape[0], dtype=np.int64)

    n_features = X.shape[1]
    fps = params.features_per_split or max(1, math.ceil(math.sqrt(n_features)))
    fps = min(fps, n_features) if n_features else 0

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        class_w = np.bincount(y[idx], weights=sample_weights[idx], minlength=n_classes)
        label, certainty, gini, total = _leaf_stats(class_w)
        node = TreeNode(
            label=label,
            certainty=certainty,
            support=int(multiplicity[idx].sum()),
            impurity=gini,
            weight=total,
        )
        at_limit = params.max_depth is not None and depth >= params.max_depth
        if at_limit or np.count_nonzero(class_w) <= 1 or idx.shape[0] < 2 or fps == 0:
            return node

        split = _best_split(
            X[idx], y[idx], sample_weights[idx], class_w, rng.permutation(n_features), fps
        )
        if split is None:
            return node
        col, threshold = split
        go_right = X[idx, col] > threshold
        node.feature = features[col]
        node.threshold = threshold
        node.left = grow(idx[~go_right], depth + 1)
        node.right = grow(idx[go_right], depth + 1)
        return node

    return DecisionTree(grow(np.flatnonzero(sample_weights > 0), 0))


def _encode_labels(labels: Sequence[str] | np.ndarray, classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[str(v)] for v in labels], dtype=np.int64)


def train_forest(
    X: np.ndarray,
    labels: Sequence[str] | np.ndarray,
    params: ForestParams,
    features: Sequence[FeatureId],
    classes: Sequence[str] | None = None,
) -> RandomForest:
    """Train a forest; tree ``t`` draws from ``default_rng([seed, t])``."""
    if X.shape[0] == 0:
        raise EmptyInputError("Cannot train a forest on zero samples")
    if len(labels) != X.shape[0]:
        raise LengthMismatchError(f"{X.shape[0]} rows but {len(labels)} labels")
    classes = list(classes) if classes is not None else sorted({str(v) for v in labels})
    y = _encode_labels(labels, classes)
    class_weight = resolve_class_weights(params, y, len(classes), classes)

    trees: list[DecisionTree] = []
    n = X.shape[0]
    for t in range(params.n_trees):
        rng = np.random.default_rng([params.seed, t])
        if params.bootstrap:
            multiplicity = np.bincount(rng.integers(0, n, n), minlength=n)
        else:
            multiplicity = np.ones(n, dtype=np.int64)
        weights = multiplicity * class_weight[y]
        trees.append(
            train_tree(X, y, weights, params, rng, features, len(classes), multiplicity)
        )
    return RandomForest(trees, classes, list(features), params)


def _tree_outputs(tree: DecisionTree, X: np.ndarray, columns: dict[FeatureId, int]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.zeros(X.shape[0], dtype=np.int64)
    certs = np.zeros(X.shape[0])

    def descend(node: TreeNode, idx: np.ndarray) -> None:
        if idx.shape[0] == 0:
            return
        if node.is_leaf:
            labels[idx] = node.label
            certs[idx] = node.certainty
            return
        assert node.feature is not None and node.left is not None and node.right is not None
        right = X[idx, columns[node.feature]] > node.threshold
        descend(node.left, idx[~right])
        descend(node.right, idx[right])

    descend(tree.root, np.arange(X.shape[0]))
    return labels, certs


def aggregate_outputs(
    labels: np.ndarray, certs: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Majority vote over trees (axis 0); certainty is the winners' mean.

    Ties go to the smallest class index.
    """
    votes = np.stack([(labels == c).sum(axis=0) for c in range(n_classes)])
    winner = np.argmax(votes, axis=0)
    won = labels == winner[None, :]
    certainty = (certs * won).sum(axis=0) / won.sum(axis=0)
    return winner, certainty


def predict_matrix(forest: RandomForest, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and certainties for each row of ``X`` (columns = forest features)."""
    if np.isnan(X).any():
        raise UndefinedFeatureError("Prediction input contains undefined values")
    columns = {f: i for i, f in enumerate(forest.features)}
    outputs = [_tree_outputs(tree, X, columns) for tree in forest.trees]
    labels = np.stack([o[0] for o in outputs])
    certs = np.stack([o[1] for o in outputs])
    return aggregate_outputs(labels, certs, len(forest.classes))


def predict_labels(forest: RandomForest, X: np.ndarray) -> np.ndarray:
    """Predicted class names for each row of ``X``."""
    winner, _ = predict_matrix(forest, X)
    return np.array([forest.classes[i] for i in winner], dtype=object)


def predict(forest: RandomForest, x: FeatureVector) -> tuple[str, float]:
    """Label and certainty of one feature vector."""
    row = np.array([[float(x.get(f)) for f in forest.features]])
    winner, certainty = predict_matrix(forest, row)
    return forest.classes[int(winner[0])], float(certainty[0])


def f1_macro(
    y_true: Sequence[str] | np.ndarray,
    y_pred: Sequence[str] | np.ndarray,
    classes: Sequence[str] | None = None,
) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``y_true``."""
    if len(y_true) != len(y_pred):
        raise LengthMismatchError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    if len(y_true) == 0:
        raise EmptyInputError("F1 of an empty prediction set is undefined")
    present = {str(v) for v in y_true}
    order = list(classes) if classes is not None else sorted(present)
    labels = [c for c in order if c in present]
    return float(
        f1_score(
            [str(v) for v in y_true],
            [str(v) for v in y_pred],
            labels=labels,
            average="macro",
            zero_division=0,
        )
    )


def stratified_cv(
    X: np.ndarray,
    labels: Sequence[str] | np.ndarray,
    params: ForestParams,
    features: Sequence[FeatureId],
    classes: Sequence[str] | None = None,
    k: int = 6,
) -> float:
    """Mean F1-macro over ``k`` stratified folds.

    ``k`` shrinks to the smallest class size when a class has fewer samples.
    """
    labels = np.asarray([str(v) for v in labels], dtype=object)
    if labels.shape[0] == 0:
        raise EmptyInputError("Cross validation needs samples")
    _, counts = np.unique(labels, return_counts=True)
    smallest = int(counts.min())
    if smallest < 2:
        raise TooFewSamplesError(f"A class has only {smallest} sample(s)")
    folds = k
    if smallest < k:
        folds = smallest
        logger.warning(f"Reducing cross validation from {k} to {folds} folds")

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=params.seed)
    classes = list(classes) if classes is not None else sorted(set(labels))
    scores = []
    for train_idx, test_idx in splitter.split(X, labels):
        forest = train_forest(X[train_idx], labels[train_idx], params, features, classes)
        predicted = predict_labels(forest, X[test_idx])
        scores.append(f1_macro(labels[test_idx], predicted, classes))
    return float(np.mean(scores))


def grid_search(
    X: np.ndarray,
    labels: Sequence[str] | np.ndarray,
    grid: Sequence[ForestParams],
    features: Sequence[FeatureId],
    classes: Sequence[str] | None = None,
    k: int = 6,
) -> tuple[RandomForest, float, ForestParams]:
    """Best parameters by cross-validated F1, retrained on all data.

    Ties keep the earliest grid entry.
    """
    if not grid:
        raise ValueError("Parameter grid is empty")
    best_score = -1.0
    best_params = grid[0]
    for params in grid:
        score = stratified_cv(X, labels, params, features, classes, k)
        logger.debug(f"Grid point {params} scored {score:.4f}")
        if score > best_score:
            best_score, best_params = score, params
    forest = train_forest(X, labels, best_params, features, classes)
    return forest, best_score, best_params


def default_grid(
    n_trees: Sequence[int],
    max_depth: Sequence[int],
    class_weights: Sequence[str],
    seed: int,
) -> list[ForestParams]:
    """Cartesian parameter grid in (trees, depth, weights) order."""
    return [
        ForestParams(n_trees=t, max_depth=d, class_weight_mode=ClassWeightMode(w), seed=seed)
        for t in n_trees
        for d in max_depth
        for w in class_weights
    ]


def mdi_importance(forest: RandomForest) -> list[tuple[FeatureId, float]]:
    """Mean decrease in impurity per feature, normalized to sum to one.

    Sorted by importance, ties by feature index. All zeros when no tree splits.
    """
    totals = dict.fromkeys(forest.features, 0.0)
    for tree in forest.trees:
        root_weight = tree.root.weight
        if root_weight <= 0:
            continue
        stack = [tree.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            assert node.feature is not None and node.left is not None and node.right is not None
            decrease = (
                node.weight * node.impurity
                - node.left.weight * node.left.impurity
                - node.right.weight * node.right.impurity
            )
            totals[node.feature] += decrease / root_weight / len(forest.trees)
            stack.extend([node.left, node.right])

    grand = sum(totals.values())
    if grand > 0:
        totals = {f: max(0.0, v) / grand for f, v in totals.items()}
    return sorted(totals.items(), key=lambda kv: (-kv[1], kv[0].index))


def select_min_features(
    X: np.ndarray,
    labels: Sequence[str] | np.ndarray,
    params: ForestParams,
    ranking: Sequence[tuple[FeatureId, float]],
    thr_s: float,
    features: Sequence[FeatureId],
    classes: Sequence[str] | None = None,
    k: int = 6,
) -> FeatureSelection:
    """Smallest prefix of ``ranking`` whose cross-validated score reaches ``thr_s``.

    ``X`` has columns ``features``. Each prefix is trained with its features
    in interchange order. When no prefix reaches the threshold the full set is
    returned with ``reached=False``.
    """
    ranked = [f for f, _ in ranking]
    score = 0.0
    subset: list[FeatureId] = []
    for size in range(1, len(ranked) + 1):
        subset = sort_features(ranked[:size])
        columns = X[:, [list(features).index(f) for f in subset]]
        score = stratified_cv(columns, labels, params, subset, classes, k)
        logger.debug(f"Prefix {[f.value for f in subset]} scored {score:.4f}")
        if score >= thr_s:
            forest = train_forest(columns, labels, params, subset, classes)
            return FeatureSelection(subset, forest, score, True)

    columns = X[:, [list(features).index(f) for f in subset]]
    forest = train_forest(columns, labels, params, subset, classes)
    return FeatureSelection(subset, forest, score, False)


def _node_to_record(node: TreeNode) -> NodeRecord:
    return NodeRecord(
        label=node.label,
        certainty=node.certainty,
        support=node.support,
        impurity=node.impurity,
        weight=node.weight,
        feature=node.feature,
        threshold=node.threshold,
        left=_node_to_record(node.left) if node.left is not None else None,
        right=_node_to_record(node.right) if node.right is not None else None,
    )


def _node_from_record(record: NodeRecord) -> TreeNode:
    return TreeNode(
        label=record.label,
        certainty=record.certainty,
        support=record.support,
        impurity=record.impurity,
        weight=record.weight,
        feature=record.feature,
        threshold=record.threshold,
        left=_node_from_record(record.left) if record.left is not None else None,
        right=_node_from_record(record.right) if record.right is not None else None,
    )


def forest_to_record(forest: RandomForest) -> ForestRecord:
    """Serializable form of a forest."""
    p = forest.params
    return ForestRecord(
        classes=forest.classes,
        features=forest.features,
        params=ForestParamsRecord(
            n_trees=p.n_trees,
            max_depth=p.max_depth,
            class_weight_mode=p.class_weight_mode.value,
            class_weights=p.class_weights,
            features_per_split=p.features_per_split,
            bootstrap=p.bootstrap,
            seed=p.seed,
        ),
        trees=[_node_to_record(t.root) for t in forest.trees],
    )


def forest_from_record(record: ForestRecord) -> RandomForest:
    """Rebuild a forest from its serialized form."""
    p = record.params
    params = ForestParams(
        n_trees=p.n_trees,
        max_depth=p.max_depth,
        class_weight_mode=ClassWeightMode(p.class_weight_mode),
        class_weights=p.class_weights,
        features_per_split=p.features_per_split,
        bootstrap=p.bootstrap,
        seed=p.seed,
    )
    return RandomForest(
        trees=[DecisionTree(_node_from_record(t)) for t in record.trees],
        classes=list(record.classes),
        features=list(record.features),
        params=params,
    )
