"""
滤波器诊断测试
"""
import numpy as np
import pytest

from diagnostics import (
    SWEEP_THRESHOLDS, baseline_partition, conv_filter_norms, filter_census, invalid_filter_ratio,
    invalid_ratio_sweep, ranked_census, ranked_partition,
)
from exceptions import ValidationError
from nn_core import Network


def layer_params(norms):
    """每个滤波器只有一个非零元素，l1 即给定值"""
    w = np.zeros((len(norms), 1, 1, 2))
    for j, norm in enumerate(norms):
        w[j, 0, 0, 0] = norm
    return {"layer0.weight": w, "layer0.bias": np.zeros(len(norms))}


class TestInvalidRatio:
    """无效滤波器比例"""

    def test_zero_threshold(self, network):
        assert invalid_filter_ratio(network, 0.0) == 0.0

    def test_three_zero_filters(self):
        params = layer_params([0.0, 0.0, 0.0] + [1.0] * 7)
        assert invalid_filter_ratio(params, 0.5) == pytest.approx(0.3)

    def test_threshold_is_strict(self):
        assert invalid_filter_ratio(layer_params([0.5, 1.0]), 0.5) == 0.0

    def test_sweep_monotone(self, network):
        sweep = invalid_ratio_sweep(network)
        assert list(sweep) == list(SWEEP_THRESHOLDS)
        values = list(sweep.values())
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_dense_only_parameters(self):
        with pytest.raises(ValidationError):
            invalid_filter_ratio({"layer0.weight": np.ones((3, 4)), "layer0.bias": np.zeros(3)}, 0.1)

    def test_negative_threshold(self, network):
        with pytest.raises(ValidationError):
            invalid_filter_ratio(network, -0.1)


class TestCensus:
    """有效 / 无效普查"""

    def test_all_zero_network(self, architecture):
        census = filter_census(Network(architecture, init="zeros"), 0.1)
        assert census.valid_count == 0
        assert census.invalid_count == census.total == 10
        assert census.valid_average is None
        assert census.invalid_average == 0.0

    def test_averages(self):
        census = filter_census(layer_params([5.0, 0.01, 3.0, 0.02]), 0.1)
        assert (census.valid_count, census.invalid_count) == (2, 2)
        assert census.valid_average == 4.0
        assert census.invalid_average == pytest.approx(0.015)
        summary = census.summary()
        assert summary["partition_mode"] == "threshold"
        assert summary["valid_average_l1"] == 4.0

    def test_records_follow_network_order(self, network):
        rows = conv_filter_norms(network)
        census = filter_census(network, 0.1)
        assert [(r.layer, r.index) for r in census.records] == [(layer, j) for layer, j, _ in rows]
        assert rows[0][:2] == ("layer0", 0) and rows[-1][:2] == ("layer3", 5)

    def test_sum_identity(self, rng):
        params = layer_params(list(rng.uniform(0, 1, size=12)))
        census = filter_census(params, 0.4)
        total = sum(norm for _, _, norm in conv_filter_norms(params))
        valid_sum = (census.valid_average or 0.0) * census.valid_count
        invalid_sum = (census.invalid_average or 0.0) * census.invalid_count
        assert valid_sum + invalid_sum == pytest.approx(total, abs=1e-9)

    def test_fixed_partition_preserves_membership(self):
        baseline = filter_census(layer_params([5.0, 0.01, 3.0, 0.02]), 0.1)
        partition = baseline_partition(baseline)
        assert partition == [True, False, True, False]
        grafted = filter_census(layer_params([4.0, 2.0, 0.05, 0.5]), 0.1, partition=partition)
        assert grafted.partition_mode == "fixed"
        assert [r.valid for r in grafted.records] == partition
        assert grafted.invalid_average == pytest.approx(1.25)
        assert grafted.valid_average == pytest.approx(2.025)

    def test_partition_length_mismatch(self):
        with pytest.raises(ValidationError):
            filter_census(layer_params([1.0, 2.0]), 0.1, partition=[True])


class TestRankedCensus:
    """按 l1 排名固定无效数量"""

    def test_lowest_filters_invalid(self):
        assert ranked_partition(layer_params([4.0, 2.0, 0.05, 0.5]), 0.5) == [True, True, False, False]

    def test_ties_lower_index_first(self):
        assert ranked_partition(layer_params([1.0, 1.0, 1.0, 3.0]), 0.25) == [False, True, True, True]

    def test_zero_fraction_all_valid(self):
        assert all(ranked_partition(layer_params([0.0, 1.0]), 0.0))

    @pytest.mark.parametrize("fraction", [-0.1, 1.0])
    def test_fraction_out_of_range(self, fraction):
        with pytest.raises(ValidationError):
            ranked_partition(layer_params([1.0, 2.0]), fraction)

    def test_invalid_class_non_empty_when_no_filter_below_threshold(self):
        params = layer_params([3.4, 3.6, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
        assert filter_census(params, 0.1).invalid_average is None

        census = ranked_census(params, 0.25)
        assert census.partition_mode == "ranked"
        assert census.invalid_count == 2
        assert census.invalid_average == pytest.approx(3.5)
        assert census.valid_average == pytest.approx(6.5)

    def test_counts_fixed_per_layer(self, architecture):
        a = ranked_census(Network(architecture, seed=1), 0.25)
        b = ranked_census(Network(architecture, seed=2), 0.25)
        assert a.invalid_count == b.invalid_count == 1 + 2
        assert [r.layer for r in a.records if not r.valid] == ["layer0", "layer3", "layer3"]
