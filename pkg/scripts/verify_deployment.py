#!/usr/bin/env python3
"""Deployment configuration verification script.

Checks a deployment.json produced by ``flowforest compile`` before it is
loaded into a switch:
1. Every table walk has an entry at every level
2. Thresholds and labels fit their fields
3. Model switch ranges and memory figures are consistent
"""

import sys
from pathlib import Path
from typing import Any

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.compiler import DeploymentConfig, load_config  # noqa: E402
from src.core.exceptions import FlowForestError  # noqa: E402
from src.core.models import ActionKind  # noqa: E402


class DeploymentVerifier:
    """Verify the integrity of a compiled deployment configuration."""

    def __init__(self, deployment_path: Path = Path("out/deployment.json")):
        self.deployment_path = deployment_path
        self.errors: list[str] = []
        self.warnings: list[str] = []
        self.stats: dict[str, Any] = {
            "models": 0,
            "trees": 0,
            "entries": 0,
            "pass_through_entries": 0,
            "row_bits": 0,
            "flows_per_10mb": 0,
        }

    def load_deployment(self) -> DeploymentConfig | None:
        """Load and validate the deployment file."""
        if not self.deployment_path.exists():
            self.errors.append(f"Deployment file not found: {self.deployment_path}")
            return None

        try:
            return load_config(self.deployment_path.read_bytes())
        except FlowForestError as e:
            self.errors.append(f"Failed to load deployment: {e}")
            return None

    def verify_tree(self, config: DeploymentConfig, m: int, t: int) -> None:
        """Every reachable key has exactly one entry on the next level."""
        model = config.models[m]
        levels = model.trees[t]
        where = f"Model {m} tree {t}"

        first = [e.key for e in levels[0]]
        if first != [(0, False)]:
            self.errors.append(f"{where}: level 0 must hold only the root key, found {first}")
            return

        for depth, level in enumerate(levels):
            keys = [e.key for e in level]
            if len(keys) != len(set(keys)):
                self.errors.append(f"{where}: duplicate keys on level {depth}")

            if depth == len(levels) - 1:
                if any(e.kind is ActionKind.INTERNAL for e in level):
                    self.errors.append(f"{where}: internal entry on the last level")
                continue

            below = {e.key for e in levels[depth + 1]}
            expected: set[tuple[int, bool]] = set()
            for e in level:
                if e.kind is ActionKind.INTERNAL:
                    assert e.next_node is not None
                    expected |= {(e.next_node, False), (e.next_node, True)}
                else:
                    assert e.leaf_node is not None
                    expected.add((e.leaf_node, False))
            missing = expected - below
            if missing:
                self.errors.append(
                    f"{where}: level {depth + 1} lacks keys {sorted(missing)}"
                )
            unreachable = below - expected
            if unreachable:
                self.warnings.append(
                    f"{where}: level {depth + 1} has unreachable keys {sorted(unreachable)}"
                )

        for depth, level in enumerate(levels):
            for e in level:
                self.stats["entries"] += 1
                if e.kind is ActionKind.INTERNAL:
                    assert e.feature is not None and e.threshold_q is not None
                    spec = config.quant[e.feature]
                    if not 0 <= e.threshold_q <= spec.max_value:
                        self.errors.append(
                            f"{where}: threshold {e.threshold_q} for {e.feature.value} "
                            f"outside {spec.bits}-bit field"
                        )
                else:
                    if e.node == e.leaf_node and depth > 0:
                        self.stats["pass_through_entries"] += 1
                    if e.label is None or not 0 <= e.label < len(config.classes):
                        self.errors.append(f"{where}: leaf label {e.label} has no class")

    def verify_model_switch(self, config: DeploymentConfig) -> None:
        """Ranges ascend, do not overlap and point at compiled models."""
        previous = 0
        for r in config.model_switch:
            if r.min_count > r.max_count:
                self.errors.append(f"Switch range {r.min_count}-{r.max_count} is empty")
            if r.min_count <= previous:
                self.errors.append(f"Switch range starting at {r.min_count} overlaps")
            previous = r.max_count
        used = {r.model for r in config.model_switch}
        for m in range(len(config.models)):
            if m not in used:
                self.warnings.append(f"Model {m} is never activated")

    def verify_limits(self, config: DeploymentConfig) -> None:
        """Compiled dimensions fit the recorded hardware limits."""
        limits = config.limits
        for m, model in enumerate(config.models):
            if len(model.trees) > limits.max_trees:
                self.errors.append(f"Model {m}: {len(model.trees)} trees > {limits.max_trees}")
            if model.depth > limits.max_depth:
                self.errors.append(f"Model {m}: depth {model.depth} > {limits.max_depth}")
            if model.levels > limits.stages:
                self.errors.append(f"Model {m}: {model.levels} levels > {limits.stages} stages")

        memory = config.memory
        expected = memory.base_bits + memory.packet_count_bits + config.layout.total
        if memory.row_bits != expected:
            self.errors.append(f"Row bits {memory.row_bits} != {expected} from layout")
        self.stats["row_bits"] = memory.row_bits
        self.stats["flows_per_10mb"] = memory.flows_per_10mb

    def verify_deployment(self) -> bool:
        """Run comprehensive verification."""
        print("Loading deployment...")
        config = self.load_deployment()

        if config is None:
            print("❌ Failed to load deployment")
            return False

        self.stats["models"] = len(config.models)
        print(f"Loaded {len(config.models)} models for classes {config.classes}")

        print("\nVerifying tables...")
        for m, model in enumerate(config.models):
            for t in range(len(model.trees)):
                self.stats["trees"] += 1
                self.verify_tree(config, m, t)

        print("\nChecking model switch and limits...")
        self.verify_model_switch(config)
        self.verify_limits(config)

        return len(self.errors) == 0

    def print_report(self) -> None:
        """Print verification report."""
        print("\n" + "=" * 60)
        print("DEPLOYMENT VERIFICATION REPORT")
        print("=" * 60)

        print("\n📊 Statistics:")
        print(f"  Models: {self.stats['models']}")
        print(f"  Trees: {self.stats['trees']}")
        print(f"  Table entries: {self.stats['entries']}")
        print(f"  Pass-through entries: {self.stats['pass_through_entries']}")
        print(f"  Bits per flow: {self.stats['row_bits']}")
        print(f"  Flows per 10MB: {self.stats['flows_per_10mb']}")

        if self.errors:
            print(f"\n❌ Errors ({len(self.errors)}):")
            for error in self.errors[:10]:
                print(f"  - {error}")
            if len(self.errors) > 10:
                print(f"  ... and {len(self.errors) - 10} more errors")

        if self.warnings:
            print(f"\n⚠️  Warnings ({len(self.warnings)}):")
            for warning in self.warnings[:5]:
                print(f"  - {warning}")
            if len(self.warnings) > 5:
                print(f"  ... and {len(self.warnings) - 5} more warnings")

        print("\n" + "=" * 60)
        if len(self.errors) == 0:
            print("✅ DEPLOYMENT VALIDATION PASSED!")
        else:
            print("❌ DEPLOYMENT VALIDATION FAILED!")
        print("=" * 60)


def main() -> None:
    """Main verification process."""
    import argparse

    parser = argparse.ArgumentParser(description="Verify a flowforest deployment")
    parser.add_argument(
        "--strict", action="store_true", help="Treat warnings as errors"
    )
    parser.add_argument(
        "--deployment",
        type=Path,
        default=Path("out/deployment.json"),
        help="Path to deployment.json",
    )
    args = parser.parse_args()

    verifier = DeploymentVerifier(args.deployment)
    success = verifier.verify_deployment()
    verifier.print_report()

    if args.strict and verifier.warnings:
        print("\n❌ Strict mode: warnings treated as errors")
        success = False

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
