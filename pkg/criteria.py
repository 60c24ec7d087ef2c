"""
信息度量模块

滤波器 l1 范数、等宽直方图熵（单个滤波器 / 整层）、逐滤波器熵之和、
网络信息量，以及验证 "H(X,Y) = H(X,Z) = H(Y,Z), Z = X + Y" 的离散联合熵工具。
熵一律使用自然对数（nats）。
"""
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ValidationError
from nn_core import ConvLayerWeights, Network

ParameterSource = Union[Network, Mapping[str, np.ndarray]]

DEFAULT_BIN_COUNT = 256
NORMALIZATION_TOLERANCE = 1e-9


class Criterion(Enum):
    L1 = "l1"
    ENTROPY = "entropy"

    @classmethod
    def parse(cls, value: Union[str, "Criterion"]) -> "Criterion":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"未知的度量准则: {value}", field="criterion", value=value)


@dataclass(frozen=True)
class HistogramSpec:
    """
    直方图设置

    bins 等宽覆盖被测张量的 [min, max]，最大值落入最后一个 bin。
    """
    bin_count: int = DEFAULT_BIN_COUNT
    range_policy: str = "minmax"

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValidationError("bin_count 必须 >= 2", field="bin_count", value=self.bin_count)
        if self.range_policy != "minmax":
            raise ValidationError(f"不支持的范围策略: {self.range_policy}", field="range_policy")


@dataclass
class EntropyResult:
    value: float
    bin_probabilities: np.ndarray


@dataclass(frozen=True)
class JointEntropies:
    h_xy: float
    h_xz: float
    h_yz: float


# ----------------------------------------------------------------------
# l1
# ----------------------------------------------------------------------

def filter_l1(filter_weights: np.ndarray) -> float:
    """滤波器所有元素绝对值之和"""
    return float(np.abs(filter_weights).sum())


def filter_l1_norms(layer: Union[ConvLayerWeights, np.ndarray]) -> np.ndarray:
    """每个输出滤波器的 l1 范数，形状 [N_out]"""
    tensor = layer.tensor if isinstance(layer, ConvLayerWeights) else np.asarray(layer)
    return np.abs(tensor).reshape(tensor.shape[0], -1).sum(axis=1)


def layer_l1(layer: Union[ConvLayerWeights, np.ndarray]) -> float:
    """层级 l1 = 各滤波器 l1 之和"""
    return float(filter_l1_norms(layer).sum())


# ----------------------------------------------------------------------
# 熵
# ----------------------------------------------------------------------

def _entropy_from_counts(counts: np.ndarray) -> Tuple[float, np.ndarray]:
    probs = counts / counts.sum()
    nonzero = probs[probs > 0]
    value = float(-(nonzero * np.log(nonzero)).sum())
    # -0.0 -> 0.0
    return value + 0.0, probs


def tensor_entropy(w: np.ndarray, spec: Optional[HistogramSpec] = None) -> EntropyResult:
    """
    张量数值的直方图熵

    Args:
        w: 非空张量
        spec: 直方图设置，默认 256 个 bin

    Returns:
        EntropyResult；min == max 时熵为 0，全部概率落在第一个 bin
    """
    spec = spec or HistogramSpec()
    values = np.asarray(w, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValidationError("不能对空张量计算熵", field="size", value=0)

    lo = values.min()
    hi = values.max()
    if lo == hi:
        probs = np.zeros(spec.bin_count)
        probs[0] = 1.0
        return EntropyResult(value=0.0, bin_probabilities=probs)

    index = np.floor((values - lo) / (hi - lo) * spec.bin_count).astype(np.int64)
    index = np.clip(index, 0, spec.bin_count - 1)
    counts = np.bincount(index, minlength=spec.bin_count).astype(np.float64)
    value, probs = _entropy_from_counts(counts)
    return EntropyResult(value=value, bin_probabilities=probs)


def layer_entropy(layer: Union[ConvLayerWeights, np.ndarray], spec: Optional[HistogramSpec] = None) -> float:
    """整层权重作为一个张量的熵（考虑滤波器之间的相关性）"""
    tensor = layer.tensor if isinstance(layer, ConvLayerWeights) else layer
    return tensor_entropy(tensor, spec).value


def layer_entropy_sum(layer: Union[ConvLayerWeights, np.ndarray], spec: Optional[HistogramSpec] = None) -> float:
    """逐滤波器熵之和 Σ_j H(W_{i,j})"""
    tensor = layer.tensor if isinstance(layer, ConvLayerWeights) else np.asarray(layer)
    return float(sum(tensor_entropy(tensor[j], spec).value for j in range(tensor.shape[0])))


def layer_information(
    weight: Union[ConvLayerWeights, np.ndarray],
    criterion: Union[str, Criterion] = Criterion.ENTROPY,
    spec: Optional[HistogramSpec] = None
) -> float:
    """按准则计算层的信息量: ENTROPY -> 整层熵，L1 -> 层级 l1"""
    if Criterion.parse(criterion) is Criterion.L1:
        return layer_l1(weight)
    return layer_entropy(weight, spec)


def conv_weights(source: ParameterSource) -> "OrderedDict[str, np.ndarray]":
    """
    按网络顺序取出所有卷积权重

    source 可以是 Network，也可以是命名参数字典（如检查点内容），
    后者中名称以 ".weight" 结尾的 4 维张量视为卷积权重。
    """
    if isinstance(source, Network):
        return OrderedDict((layer.name, layer.tensor) for layer in source.conv_layers())
    return OrderedDict(
        (name, tensor) for name, tensor in source.items()
        if name.endswith(".weight") and np.ndim(tensor) == 4
    )


def network_information(source: ParameterSource, spec: Optional[HistogramSpec] = None) -> float:
    """各卷积层整层熵之和"""
    return float(sum(layer_entropy(w, spec) for w in conv_weights(source).values()))


def layer_entropies(source: ParameterSource, spec: Optional[HistogramSpec] = None) -> Dict[str, float]:
    """逐层熵，供熵轨迹诊断使用"""
    return {name: layer_entropy(w, spec) for name, w in conv_weights(source).items()}


# ----------------------------------------------------------------------
# 联合熵
# ----------------------------------------------------------------------

def _support(values: Optional[Sequence[int]], size: int, field: str) -> List[int]:
    if values is None:
        return list(range(size))
    support = [int(v) for v in values]
    if len(support) != size:
        raise ValidationError("支撑集长度与联合分布维度不一致", field=field, value=len(support))
    if len(set(support)) != size:
        raise ValidationError("支撑集取值必须互不相同", field=field, value=support)
    return support


def _entropy_of(masses: Mapping[Tuple[int, int], float]) -> float:
    return _entropy_from_counts(np.fromiter(masses.values(), dtype=np.float64))[0]


def joint_entropy_oracle(
    joint: np.ndarray,
    x_support: Optional[Sequence[int]] = None,
    y_support: Optional[Sequence[int]] = None
) -> JointEntropies:
    """
    由 (X, Y) 的联合分布穷举计算 H(X,Y)、H(X,Z)、H(Y,Z)，其中 Z = X + Y

    Args:
        joint: 概率矩阵，joint[i, j] = P(X = x_support[i], Y = y_support[j])
        x_support: X 的整数取值，默认 0..rows-1
        y_support: Y 的整数取值，默认 0..cols-1

    Raises:
        ValidationError: 存在负概率或总和不为 1
    """
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValidationError("联合分布必须是非空矩阵", field="joint.shape", value=p.shape)
    if (p < 0).any():
        raise ValidationError("联合分布存在负概率", field="joint")
    total = float(p.sum())
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise ValidationError("联合分布未归一化", field="joint.sum", value=total)
    xs = _support(x_support, p.shape[0], "x_support")
    ys = _support(y_support, p.shape[1], "y_support")

    xy: Dict[Tuple[int, int], float] = {}
    xz: Dict[Tuple[int, int], float] = {}
    yz: Dict[Tuple[int, int], float] = {}
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            mass = float(p[i, j])
            if mass == 0.0:
                continue
            z = x + y
            xy[(x, y)] = xy.get((x, y), 0.0) + mass
            xz[(x, z)] = xz.get((x, z), 0.0) + mass
            yz[(y, z)] = yz.get((y, z), 0.0) + mass

    return JointEntropies(h_xy=_entropy_of(xy), h_xz=_entropy_of(xz), h_yz=_entropy_of(yz))
