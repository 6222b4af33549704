"""Pytest configuration and fixtures."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src.core.compiler import DeploymentConfig, compile_classifier  # noqa: E402
from src.core.context_trainer import (  # noqa: E402
    Classifier,
    ContextDataset,
    ContextModel,
    TrainerConfig,
)
from src.core.features import FeatureId  # noqa: E402
from src.core.forest import (  # noqa: E402
    DecisionTree,
    ForestParams,
    RandomForest,
    TreeNode,
)
from src.core.synthetic import phase_dataset  # noqa: E402
from src.core.traffic import PROTO_TCP, PacketRecord, TcpFlag  # noqa: E402


def make_packet(
    ts: int,
    length: int = 100,
    src_ip: str = "10.0.0.1",
    dst_ip: str = "10.0.0.2",
    src_port: int = 1234,
    dst_port: int = 80,
    protocol: int = PROTO_TCP,
    flags: frozenset[TcpFlag] = frozenset(),
) -> PacketRecord:
    """Packet with sensible defaults for hand-built traces."""
    return PacketRecord(ts, src_ip, dst_ip, src_port, dst_port, protocol, length, flags)


def stump(feature: FeatureId, threshold: float, certainties: tuple[float, float] = (1.0, 0.8)) -> DecisionTree:
    """Depth-1 tree: class 0 at or below ``threshold``, class 1 above."""
    return DecisionTree(
        TreeNode(
            label=0,
            certainty=0.5,
            support=10,
            feature=feature,
            threshold=threshold,
            left=TreeNode(label=0, certainty=certainties[0], support=5),
            right=TreeNode(label=1, certainty=certainties[1], support=5),
        )
    )


def leaf_tree(label: int, certainty: float) -> DecisionTree:
    """Single-leaf tree."""
    return DecisionTree(TreeNode(label=label, certainty=certainty, support=10))


@pytest.fixture
def len_max_forest() -> RandomForest:
    """Two trees: a stump on len_max at 500 and a constant class-0 leaf."""
    return RandomForest(
        trees=[stump(FeatureId.LEN_MAX, 500.0), leaf_tree(0, 0.6)],
        classes=["small", "large"],
        features=[FeatureId.LEN_MAX],
        params=ForestParams(n_trees=2, max_depth=1),
    )


@pytest.fixture
def stump_classifier(len_max_forest: RandomForest) -> Classifier:
    """One model active from the second packet on."""
    return Classifier(
        models=[ContextModel(2, len_max_forest, [FeatureId.LEN_MAX], 1.0)],
        thr_s=0.9,
        thr_c=0.0,
        classes=["small", "large"],
    )


@pytest.fixture
def stump_config(stump_classifier: Classifier) -> DeploymentConfig:
    """Compiled stump classifier at the default accuracy."""
    return compile_classifier(stump_classifier)


@pytest.fixture
def fast_trainer_config() -> TrainerConfig:
    """One grid point, exhaustive splits and three folds."""
    return TrainerConfig(
        grid=[ForestParams(n_trees=5, max_depth=5, features_per_split=18, seed=0)],
        horizon=10,
        eps=0.3,
        min_pts=1,
        bins=64,
        cv_folds=3,
    )


@pytest.fixture(scope="session")
def phase_data() -> ContextDataset:
    """Phase-structured contexts shared across the session."""
    return phase_dataset(n_samples=300, seed=0)
