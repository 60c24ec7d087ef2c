"""
滤波器诊断

无效滤波器比例、按阈值或固定划分的有效 / 无效滤波器普查。
输入可以是 Network，也可以是检查点读出的命名参数字典。
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from criteria import ParameterSource, conv_weights, filter_l1_norms
from exceptions import ValidationError

DEFAULT_THRESHOLDS = (1e-3, 1e-1)
SWEEP_THRESHOLDS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True)
class FilterRecord:
    layer: str
    index: int
    l1_norm: float
    valid: bool


@dataclass
class FilterCensus:
    """
    有效 / 无效滤波器普查

    某一类为空时其平均 l1 为 None（不是 0）。
    partition_mode 为 "threshold" 时按 l1 >= threshold 划分，
    为 "fixed" 时使用外部给定的划分（通常来自基线网络），
    为 "ranked" 时按各层 l1 排名固定无效数量，threshold 字段为无效比例。
    """
    threshold: float
    records: List[FilterRecord] = field(default_factory=list)
    partition_mode: str = "threshold"

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def valid_count(self) -> int:
        return sum(1 for r in self.records if r.valid)

    @property
    def invalid_count(self) -> int:
        return self.total - self.valid_count

    def _average(self, valid: bool) -> Optional[float]:
        norms = [r.l1_norm for r in self.records if r.valid == valid]
        return float(np.mean(norms)) if norms else None

    @property
    def valid_average(self) -> Optional[float]:
        return self._average(True)

    @property
    def invalid_average(self) -> Optional[float]:
        return self._average(False)

    def summary(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "partition_mode": self.partition_mode,
            "total": self.total,
            "valid_count": self.valid_count,
            "invalid_count": self.invalid_count,
            "valid_average_l1": self.valid_average,
            "invalid_average_l1": self.invalid_average,
        }


def conv_filter_norms(source: ParameterSource) -> List[Tuple[str, int, float]]:
    """按网络顺序列出 (层名, 滤波器序号, l1)"""
    rows: List[Tuple[str, int, float]] = []
    for name, weight in conv_weights(source).items():
        layer = name[:-len(".weight")]
        for j, norm in enumerate(filter_l1_norms(weight)):
            rows.append((layer, j, float(norm)))
    return rows


def _check_threshold(threshold: float) -> None:
    if threshold < 0:
        raise ValidationError("阈值必须 >= 0", field="threshold", value=threshold)


def invalid_filter_ratio(source: ParameterSource, threshold: float) -> float:
    """l1 严格小于 threshold 的卷积滤波器所占比例"""
    _check_threshold(threshold)
    norms = np.array([row[2] for row in conv_filter_norms(source)])
    if norms.size == 0:
        raise ValidationError("网络中没有卷积滤波器", field="conv_filters", value=0)
    return float((norms < threshold).sum() / norms.size)


def invalid_ratio_sweep(source: ParameterSource, thresholds: Iterable[float] = SWEEP_THRESHOLDS) -> Dict[float, float]:
    return {float(t): invalid_filter_ratio(source, t) for t in thresholds}


def filter_census(
    source: ParameterSource,
    threshold: float,
    partition: Optional[Sequence[bool]] = None
) -> FilterCensus:
    """
    对所有卷积滤波器分类并统计

    Args:
        source: 网络或参数字典
        threshold: l1 阈值
        partition: 固定划分（每个滤波器一个 valid 标志，顺序同 conv_filter_norms）

    Raises:
        ValidationError: 阈值为负或划分长度与滤波器数不一致
    """
    _check_threshold(threshold)
    rows = conv_filter_norms(source)
    if partition is not None and len(partition) != len(rows):
        raise ValidationError("划分长度与滤波器数量不一致", field="partition", value=len(partition))

    census = FilterCensus(threshold=threshold, partition_mode="threshold" if partition is None else "fixed")
    for i, (layer, index, norm) in enumerate(rows):
        valid = bool(partition[i]) if partition is not None else norm >= threshold
        census.records.append(FilterRecord(layer=layer, index=index, l1_norm=norm, valid=valid))
    return census


def baseline_partition(census: FilterCensus) -> List[bool]:
    """把一次普查的分类固定下来，供比较其他网络时复用"""
    return [r.valid for r in census.records]


def ranked_partition(source: ParameterSource, invalid_fraction: float) -> List[bool]:
    """
    按 l1 排名固定无效滤波器的数量

    每个卷积层中 l1 最小的 round(invalid_fraction·n) 个滤波器记为无效，
    l1 相同时序号小者在前。同一结构的网络得到相同的有效 / 无效数量，
    各自的成员由自身的排名决定。

    Raises:
        ValidationError: invalid_fraction 不在 [0, 1) 内
    """
    if not 0.0 <= invalid_fraction < 1.0:
        raise ValidationError("invalid_fraction 必须在 [0, 1) 内", field="invalid_fraction", value=invalid_fraction)
    flags: List[bool] = []
    for weight in conv_weights(source).values():
        norms = filter_l1_norms(weight)
        count = int(np.floor(invalid_fraction * norms.size + 0.5))
        ranked = sorted(range(norms.size), key=lambda j: (norms[j], j))
        invalid = set(ranked[:count])
        flags.extend(j not in invalid for j in range(norms.size))
    return flags


def ranked_census(source: ParameterSource, invalid_fraction: float) -> FilterCensus:
    """按 ranked_partition 划分的普查；threshold 字段记录 invalid_fraction"""
    census = filter_census(source, invalid_fraction, ranked_partition(source, invalid_fraction))
    census.partition_mode = "ranked"
    return census
