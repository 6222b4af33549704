"""Tests for the random forest implementation."""

import numpy as np
import pytest

from src.core.exceptions import (
    EmptyInputError,
    LengthMismatchError,
    TooFewSamplesError,
    UndefinedFeatureError,
)
from src.core.features import FeatureId
from src.core.forest import (
    ClassWeightMode,
    ForestParams,
    aggregate_outputs,
    default_grid,
    f1_macro,
    forest_from_record,
    forest_to_record,
    grid_search,
    mdi_importance,
    predict_labels,
    predict_matrix,
    select_min_features,
    stratified_cv,
    train_forest,
)

FEATURES = [FeatureId.LEN_MIN, FeatureId.SYN_COUNT]


@pytest.fixture
def separable() -> tuple[np.ndarray, np.ndarray]:
    """Column 0 separates the classes with a wide gap; column 1 is noise."""
    rng = np.random.default_rng(1)
    informative = np.concatenate([np.arange(50), np.arange(100, 150)]).astype(np.float64)
    noise = rng.integers(0, 10, 100).astype(np.float64)
    X = np.column_stack([informative, noise])
    labels = np.array(["a" if v < 50 else "b" for v in informative], dtype=object)
    return X, labels


class TestTraining:
    """Test forest training and prediction."""

    def test_learns_separable_data(self, separable) -> None:
        """A small forest fits linearly separable data exactly."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=5, max_depth=4), FEATURES)

        assert forest.classes == ["a", "b"]
        assert list(predict_labels(forest, X)) == list(labels)

    def test_threshold_sends_equal_values_left(self) -> None:
        """Thresholds sit between values and equal values go left."""
        X = np.array([[1.0], [2.0]])
        forest = train_forest(
            X, ["a", "b"], ForestParams(n_trees=1, bootstrap=False), [FeatureId.LEN_MIN]
        )
        root = forest.trees[0].root
        assert root.threshold == 1.5
        assert list(predict_labels(forest, np.array([[1.5], [1.6]]))) == ["a", "b"]

    def test_same_seed_same_forest(self, separable) -> None:
        """The same seed gives the same serialized forest."""
        X, labels = separable
        params = ForestParams(n_trees=3, max_depth=3, seed=7)
        first = forest_to_record(train_forest(X, labels, params, FEATURES))
        second = forest_to_record(train_forest(X, labels, params, FEATURES))
        assert first == second

    def test_depth_limit(self, separable) -> None:
        """No tree grows beyond max_depth."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=3, max_depth=1), FEATURES)
        assert forest.depth <= 1

    def test_zero_depth_is_majority_leaf(self, separable) -> None:
        """Depth zero trees are single leaves."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=2, max_depth=0), FEATURES)
        assert all(t.root.is_leaf for t in forest.trees)

    def test_pure_leaves_are_certain(self, separable) -> None:
        """Pure leaves carry full certainty."""
        X, labels = separable
        forest = train_forest(
            X, labels, ForestParams(n_trees=1, max_depth=None, bootstrap=False), FEATURES
        )
        _, certainty = predict_matrix(forest, X)
        assert np.all(certainty == 1.0)

    def test_empty_input(self) -> None:
        """Training on no rows is an error."""
        with pytest.raises(EmptyInputError):
            train_forest(np.empty((0, 2)), [], ForestParams(), FEATURES)

    def test_label_length_mismatch(self, separable) -> None:
        """Labels must match the row count."""
        X, labels = separable
        with pytest.raises(LengthMismatchError):
            train_forest(X, labels[:-1], ForestParams(), FEATURES)

    def test_nan_rejected(self, separable) -> None:
        """Undefined feature values cannot be trained on."""
        X, labels = separable
        X = X.copy()
        X[0, 0] = np.nan
        with pytest.raises(UndefinedFeatureError):
            train_forest(X, labels, ForestParams(n_trees=1), FEATURES)

    def test_invalid_params(self) -> None:
        """Non-positive tree counts and class weights are rejected."""
        with pytest.raises(ValueError):
            ForestParams(n_trees=0)
        with pytest.raises(ValueError):
            ForestParams(class_weights={"a": 0.0})

    def test_balanced_weights_accepted(self, separable) -> None:
        """Balanced class weights train a working forest."""
        X, labels = separable
        params = ForestParams(n_trees=2, class_weight_mode="balanced")
        assert params.class_weight_mode is ClassWeightMode.BALANCED
        forest = train_forest(X, labels, params, FEATURES)
        assert len(forest.trees) == 2


class TestAggregation:
    """Test vote aggregation."""

    def test_majority_and_mean_certainty(self) -> None:
        """Majority label and floor mean certainty code."""
        labels = np.array([[1], [0], [1]])
        certs = np.array([[0.8], [1.0], [0.6]])
        winner, certainty = aggregate_outputs(labels, certs, 2)
        assert winner.tolist() == [1]
        assert certainty[0] == pytest.approx(0.7)

    def test_tie_goes_to_smallest_class(self) -> None:
        """Vote ties go to the smallest class index."""
        labels = np.array([[1], [0]])
        certs = np.array([[0.9], [0.5]])
        winner, certainty = aggregate_outputs(labels, certs, 2)
        assert winner.tolist() == [0]
        assert certainty[0] == pytest.approx(0.5)


class TestScoring:
    """Test F1, cross validation and grid search."""

    def test_f1_macro_perfect(self) -> None:
        """Perfect predictions score 1."""
        assert f1_macro(["a", "b"], ["a", "b"]) == 1.0

    def test_f1_macro_ignores_absent_classes(self) -> None:
        """Listed classes missing from y_true do not count."""
        assert f1_macro(["a", "a"], ["a", "a"], ["a", "b", "c"]) == 1.0

    def test_f1_macro_ignores_predicted_only_classes(self) -> None:
        """Classes that only appear in predictions do not count."""
        # class a: P=1, R=0.5; b never occurs in y_true
        assert f1_macro(["a", "a"], ["a", "b"]) == pytest.approx(2 / 3)

    def test_f1_macro_half(self) -> None:
        """Per-class F1 values are averaged without weights."""
        # class a: P=1, R=0.5, F1=2/3; class b: P=0.5, R=1, F1=2/3
        assert f1_macro(["a", "a", "b"], ["a", "b", "b"]) == pytest.approx(2 / 3)

    def test_f1_errors(self) -> None:
        """Empty and mismatched inputs are rejected."""
        with pytest.raises(EmptyInputError):
            f1_macro([], [])
        with pytest.raises(LengthMismatchError):
            f1_macro(["a"], [])

    def test_cv_on_separable(self, separable) -> None:
        """Cross validation scores separable data highly."""
        X, labels = separable
        score = stratified_cv(X, labels, ForestParams(n_trees=3, max_depth=3), FEATURES, k=3)
        assert score >= 0.95

    def test_cv_needs_two_per_class(self) -> None:
        """A class with one sample cannot be cross validated."""
        X = np.array([[1.0], [2.0], [3.0]])
        with pytest.raises(TooFewSamplesError):
            stratified_cv(X, ["a", "a", "b"], ForestParams(), [FeatureId.LEN_MIN])

    def test_cv_reduces_folds(self, separable) -> None:
        """Folds shrink to the smallest class size."""
        X, labels = separable
        X, labels = X[[0, 1, 98, 99]], labels[[0, 1, 98, 99]]
        score = stratified_cv(X, labels, ForestParams(n_trees=1, bootstrap=False), FEATURES, k=6)
        assert 0.0 <= score <= 1.0

    def test_grid_search_keeps_earliest_on_ties(self, separable) -> None:
        """Equal scores keep the first grid point."""
        X, labels = separable
        grid = default_grid([2], [3, 4], ["uniform"], seed=0)
        forest, score, params = grid_search(X, labels, grid, FEATURES, k=3)
        assert score == 1.0
        assert params is grid[0]
        assert forest.params == params

    def test_default_grid_order(self) -> None:
        """The default grid varies tree count outermost and weight mode innermost."""
        grid = default_grid([5, 10], [3], ["uniform", "balanced"], seed=4)
        assert [(g.n_trees, g.class_weight_mode.value) for g in grid] == [
            (5, "uniform"),
            (5, "balanced"),
            (10, "uniform"),
            (10, "balanced"),
        ]
        assert all(g.seed == 4 for g in grid)

    def test_empty_grid(self, separable) -> None:
        """An empty grid is an error."""
        X, labels = separable
        with pytest.raises(ValueError):
            grid_search(X, labels, [], FEATURES)


class TestImportance:
    """Test MDI ranking and minimal feature selection."""

    def test_informative_feature_ranks_first(self, separable) -> None:
        """The separating column has the highest importance."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=5, max_depth=3), FEATURES)
        ranking = mdi_importance(forest)

        assert ranking[0][0] is FeatureId.LEN_MIN
        assert sum(v for _, v in ranking) == pytest.approx(1.0)

    def test_no_splits_all_zero(self, separable) -> None:
        """Forests without splits have zero importance."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=2, max_depth=0), FEATURES)
        ranking = mdi_importance(forest)
        assert [v for _, v in ranking] == [0.0, 0.0]
        # ties ordered by feature index
        assert [f for f, _ in ranking] == FEATURES

    def test_minimal_subset(self, separable) -> None:
        """The shortest prefix reaching the threshold is kept."""
        X, labels = separable
        params = ForestParams(n_trees=3, max_depth=3)
        ranking = [(FeatureId.LEN_MIN, 0.9), (FeatureId.SYN_COUNT, 0.1)]
        selection = select_min_features(X, labels, params, ranking, 0.9, FEATURES, k=3)

        assert selection.reached
        assert selection.features == [FeatureId.LEN_MIN]
        assert selection.forest.features == [FeatureId.LEN_MIN]

    def test_unreachable_threshold_returns_full_set(self, separable) -> None:
        """An unreachable threshold keeps every feature."""
        X, labels = separable
        params = ForestParams(n_trees=2, max_depth=0)
        ranking = [(FeatureId.SYN_COUNT, 0.6), (FeatureId.LEN_MIN, 0.4)]
        selection = select_min_features(X, labels, params, ranking, 0.99, FEATURES, k=3)

        assert not selection.reached
        assert selection.features == FEATURES


class TestRecords:
    """Test forest serialization."""

    def test_record_round_trip(self, separable) -> None:
        """A rebuilt forest predicts like the original."""
        X, labels = separable
        forest = train_forest(X, labels, ForestParams(n_trees=2, max_depth=2), FEATURES)
        rebuilt = forest_from_record(forest_to_record(forest))

        assert rebuilt.features == forest.features
        assert rebuilt.params == forest.params
        np.testing.assert_array_equal(predict_labels(rebuilt, X), predict_labels(forest, X))
