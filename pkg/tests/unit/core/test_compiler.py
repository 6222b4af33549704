"""Tests for quantization and table compilation."""

import numpy as np
import pytest

from src.core.compiler import (
    BitLayout,
    HardwareLimits,
    LayoutField,
    QuantSpec,
    SwitchRange,
    certainty_code,
    certainty_threshold_code,
    compile_classifier,
    compile_tree,
    config_from_record,
    config_to_record,
    dump_rows,
    floor_log2,
    layout_features,
    load_config,
    model_for_count,
    quantize_spec,
    quantize_threshold,
    quantize_value,
    serialize_config,
)
from src.core.context_trainer import Classifier, ContextModel
from src.core.exceptions import (
    DepthExceededError,
    HardwareLimitExceededError,
    MalformedConfigError,
)
from src.core.features import NATIVE_WIDTH, FeatureId
from src.core.forest import RandomForest
from src.core.models import ActionKind
from tests.conftest import leaf_tree, stump


class TestQuantization:
    """Test fixed-point specs and value encoding."""

    def test_floor_log2(self) -> None:
        """Integer floor of log2 for integers, fractions and non-powers."""
        assert floor_log2(1) == 0
        assert floor_log2(2.5) == 1
        assert floor_log2(0.5) == -1
        assert floor_log2(1024) == 10
        assert floor_log2(1023.9) == 9
        with pytest.raises(ValueError):
            floor_log2(0)

    def test_extremum_spec(self) -> None:
        """A single 500 threshold gives 9 bits at shift 1."""
        spec = quantize_spec(FeatureId.LEN_MAX, [500.0])
        assert (spec.bits, spec.shift, spec.guard_bits) == (9, 1, 0)
        assert quantize_threshold(500.0, spec) == 250
        assert spec.max_value == 511

    def test_ewma_gets_guard_bits(self) -> None:
        """Moving averages store two extra fraction bits."""
        spec = quantize_spec(FeatureId.LEN_AVG, [500.0])
        assert spec.guard_bits == 2
        assert spec.width == spec.bits + 2

    def test_counter_uses_unit_accuracy(self) -> None:
        """Flag counters quantize with a = 1 and t_min = 1."""
        spec = quantize_spec(FeatureId.SYN_COUNT, [5.5, 2.5])
        assert (spec.bits, spec.shift) == (5, -1)
        assert quantize_value(3, spec) == 6
        assert quantize_threshold(2.5, spec) == 5

    def test_stateless_keeps_native_width(self) -> None:
        """Ports keep 16 bits and no shift."""
        spec = quantize_spec(FeatureId.DST_PORT, [80.5, 443.5])
        assert (spec.bits, spec.shift) == (16, 0)

    def test_non_positive_threshold_falls_back(self) -> None:
        """A zero threshold falls back to the native width."""
        spec = quantize_spec(FeatureId.LEN_MIN, [0.0, 10.0])
        assert spec.bits == NATIVE_WIDTH[FeatureId.LEN_MIN]
        assert spec.shift == 0

    def test_invalid_inputs(self) -> None:
        """No thresholds or a non-positive accuracy are rejected."""
        with pytest.raises(ValueError):
            quantize_spec(FeatureId.LEN_MAX, [])
        with pytest.raises(ValueError):
            quantize_spec(FeatureId.LEN_MAX, [1.0], accuracy=0)

    def test_values_clamp(self) -> None:
        """Values clamp to the field and thresholds stay below saturation."""
        spec = quantize_spec(FeatureId.LEN_MAX, [500.0])
        assert quantize_value(-4, spec) == 0
        assert quantize_value(10_000, spec) == spec.max_value
        # saturated values stay above every threshold
        assert quantize_threshold(10_000, spec) == spec.max_value - 1

    def test_comparisons_preserved(self) -> None:
        """Comparisons outside the accuracy margin keep their outcome."""
        thresholds = [37.0, 500.0, 1337.5]
        accuracy = 0.01
        spec = quantize_spec(FeatureId.LEN_MAX, thresholds, accuracy)
        values = np.random.default_rng(0).uniform(0, 3000, 2000)

        for t in thresholds:
            tq = quantize_threshold(t, spec)
            for v in values:
                vq = quantize_value(v, spec)
                if v <= t:
                    assert vq <= tq
                elif v >= t * (1 + accuracy):
                    assert vq > tq

    def test_certainty_codes(self) -> None:
        """Certainties and thresholds map to 8-bit codes."""
        assert certainty_code(0.8) == 204
        assert certainty_code(1.0) == 255
        assert certainty_code(0.0) == 0
        assert certainty_threshold_code(0.2) == 51
        assert certainty_threshold_code(0.9) == 230
        assert certainty_threshold_code(0.0) == 0


class TestLayout:
    """Test the packed register layout."""

    def test_only_stored_features_take_space(self) -> None:
        """Stateless features and the packet count take no layout bits."""
        specs = [
            quantize_spec(FeatureId.DST_PORT, [80.5]),
            quantize_spec(FeatureId.LEN_AVG, [500.0]),
            quantize_spec(FeatureId.PKT_COUNT, [3.5]),
            quantize_spec(FeatureId.LEN_MAX, [500.0]),
        ]
        layout = layout_features(specs)

        assert layout.features == [FeatureId.LEN_MAX, FeatureId.LEN_AVG]
        assert layout.field_for(FeatureId.LEN_MAX).offset == 0
        assert layout.field_for(FeatureId.LEN_AVG).offset == 9
        assert layout.total == 9 + specs[1].width
        with pytest.raises(KeyError):
            layout.field_for(FeatureId.DST_PORT)

    def test_pack_unpack(self) -> None:
        """Fields pack at their offsets and unpack back."""
        layout = BitLayout([LayoutField(FeatureId.LEN_MIN, 0, 4), LayoutField(FeatureId.LEN_MAX, 4, 3)])
        bits = layout.pack({FeatureId.LEN_MIN: 9, FeatureId.LEN_MAX: 5})
        assert bits == 9 | (5 << 4)
        assert layout.unpack(bits) == {FeatureId.LEN_MIN: 9, FeatureId.LEN_MAX: 5}

    def test_pack_rejects_overflow(self) -> None:
        """A value wider than its field is rejected."""
        layout = BitLayout([LayoutField(FeatureId.LEN_MIN, 0, 4)])
        with pytest.raises(ValueError):
            layout.pack({FeatureId.LEN_MIN: 16})


class TestTables:
    """Test tree to table encoding."""

    @pytest.fixture
    def specs(self) -> dict[FeatureId, QuantSpec]:
        return {FeatureId.LEN_MAX: quantize_spec(FeatureId.LEN_MAX, [500.0])}

    def test_stump_levels(self, specs) -> None:
        """A stump compiles to a root entry and two leaf entries."""
        levels = compile_tree(stump(FeatureId.LEN_MAX, 500.0), 1, specs)

        (root,) = levels[0]
        assert root.key == (0, False)
        assert root.kind is ActionKind.INTERNAL
        assert (root.feature, root.threshold_q, root.next_node) == (FeatureId.LEN_MAX, 250, 0)
        left, right = levels[1]
        assert (left.key, left.label, left.leaf_node, left.certainty_q) == ((0, False), 0, 1, 255)
        assert (right.key, right.label, right.leaf_node, right.certainty_q) == ((0, True), 1, 2, 204)

    def test_leaf_root_passes_through(self, specs) -> None:
        """A single-leaf tree is copied down every level."""
        levels = compile_tree(leaf_tree(1, 0.6), 2, specs)

        assert [len(level) for level in levels] == [1, 1, 1]
        assert levels[0][0].key == (0, False)
        for level in levels[1:]:
            entry = level[0]
            assert entry.key == (0, False)
            assert entry.kind is ActionKind.LEAF
            assert entry.label == 1

    def test_tree_deeper_than_model(self, specs) -> None:
        """A tree deeper than its model depth cannot be encoded."""
        with pytest.raises(DepthExceededError):
            compile_tree(stump(FeatureId.LEN_MAX, 500.0), 0, specs)


class TestCompileClassifier:
    """Test whole-classifier compilation."""

    def test_stump_config(self, stump_config) -> None:
        """The stump classifier compiles to five entries and a 65-bit row."""
        assert stump_config.models[0].entry_count() == 5
        assert stump_config.model_switch == [SwitchRange(2, 127, 0)]
        assert stump_config.thr_c_q == 0
        assert stump_config.memory.row_bits == 65
        assert stump_config.memory.flows_per_10mb == 1_230_769
        assert stump_config.memory.register_bits(4) == 260

    def test_model_for_count(self, stump_config) -> None:
        """No model before packet two, model 0 from there to 127."""
        assert model_for_count(stump_config, 1) is None
        assert model_for_count(stump_config, 2) == 0
        assert model_for_count(stump_config, 127) == 0

    def test_shared_forests_compiled_once(self) -> None:
        """A reused forest is compiled once and pointed to twice."""
        classes = ["small", "large"]
        first = RandomForest([stump(FeatureId.LEN_MAX, 500.0)], classes, [FeatureId.LEN_MAX])
        second = RandomForest([stump(FeatureId.LEN_MIN, 40.0)], classes, [FeatureId.LEN_MIN])
        classifier = Classifier(
            [
                ContextModel(1, first, [FeatureId.LEN_MAX], 1.0),
                ContextModel(3, second, [FeatureId.LEN_MIN], 1.0),
                ContextModel(5, first, [FeatureId.LEN_MAX], 1.0, reused_from=0),
            ],
            0.9,
            0.2,
            classes,
        )
        config = compile_classifier(classifier)

        assert len(config.models) == 2
        assert config.model_switch == [
            SwitchRange(1, 2, 0),
            SwitchRange(3, 4, 1),
            SwitchRange(5, 127, 0),
        ]
        assert config.thr_c_q == 51
        assert config.layout.features == [FeatureId.LEN_MIN, FeatureId.LEN_MAX]

    def test_hardware_limits(self, stump_classifier) -> None:
        """Tree and stage limits fail with the offending dimension."""
        with pytest.raises(HardwareLimitExceededError) as exc:
            compile_classifier(stump_classifier, limits=HardwareLimits(max_trees=1))
        assert exc.value.dimension == "max_trees"
        assert (exc.value.limit, exc.value.actual) == (1, 2)
        assert exc.value.exit_code == 4

        with pytest.raises(HardwareLimitExceededError) as exc:
            compile_classifier(stump_classifier, limits=HardwareLimits(stages=1))
        assert exc.value.dimension == "stages"


class TestSerialization:
    """Test the deployment config format."""

    def test_round_trip(self, stump_config) -> None:
        """A serialized config loads back equal and reserializes to the same bytes."""
        raw = serialize_config(stump_config)
        loaded = load_config(raw)

        assert loaded == stump_config
        assert serialize_config(loaded) == raw

    def test_garbage(self) -> None:
        """Invalid JSON and an empty object are malformed configs."""
        with pytest.raises(MalformedConfigError):
            load_config(b"not json")
        with pytest.raises(MalformedConfigError):
            load_config(b"{}")

    def test_layout_width_mismatch(self, stump_config) -> None:
        """A layout width that disagrees with its fields is rejected."""
        record = config_to_record(stump_config).model_copy(update={"layout_width": 99})
        with pytest.raises(MalformedConfigError):
            config_from_record(record)

    def test_switch_to_missing_model(self, stump_config) -> None:
        """A switch range pointing past the models is rejected."""
        record = config_to_record(stump_config)
        bad = record.model_copy(
            update={"model_switch": [record.model_switch[0].model_copy(update={"model": 3})]}
        )
        with pytest.raises(MalformedConfigError):
            config_from_record(bad)

    def test_dump_rows(self, stump_config) -> None:
        """The dump prints one readable row per entry."""
        rows = dump_rows(stump_config)
        assert len(rows) == 5
        assert rows[0] == ("0", "0", "0", "(0, False)", "goto 0: len_max > 250")
        assert rows[2] == ("0", "0", "1", "(0, True)", "leaf 2: large (204)")
