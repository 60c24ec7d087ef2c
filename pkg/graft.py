"""
嫁接模块

三种接穗来源:
    噪声   - 给 l1 低于 γ 的无效滤波器加上随时间衰减的高斯噪声
    内部   - 把层内第 i 大的滤波器加到第 i 小的无效滤波器上
    外部   - 与另一网络同层权重按自适应系数 α 做凸组合（层级嫁接）

α = A·arctan(c·(H_self − H_other)) + 0.5，再截断到 [ε, 1−ε]。
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Mapping, MutableMapping, Optional, Tuple, Union

import numpy as np

from criteria import Criterion, HistogramSpec, filter_l1_norms, layer_information
from exceptions import ConfigError, ValidationError
from logger import get_logger
from nn_core import ConvLayerWeights, Network

logger = get_logger()

FilterId = Tuple[str, int]
GraftPair = Tuple[int, int]

INTERNAL_MODES = ("additive", "replace")


class ScionSource(Enum):
    NOISE = "noise"
    INTERNAL = "internal"
    EXTERNAL = "external"

    @classmethod
    def parse(cls, value: Union[str, "ScionSource"]) -> "ScionSource":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"未知的接穗来源: {value}", config_key="graft.scion_source")


@dataclass
class GraftConfig:
    """嫁接超参数"""
    scion_source: ScionSource = ScionSource.EXTERNAL
    criterion: Criterion = Criterion.ENTROPY
    A: float = 0.4
    c: float = 5.0  # 小网络的层熵差在 0.05~0.3 量级，α 不贴截断边界
    bin_count: int = 256
    invalid_threshold_gamma: float = 0.1
    noise_decay_a: float = 0.9
    graft_period_iters: Optional[int] = None  # None: 每个 epoch 一次
    alpha_clamp_epsilon: float = 0.05
    enabled: bool = True
    graft_dense: bool = False
    internal_mode: str = "additive"

    def __post_init__(self):
        self.scion_source = ScionSource.parse(self.scion_source)
        try:
            self.criterion = Criterion.parse(self.criterion)
        except ValidationError as e:
            raise ConfigError(e.message, config_key="graft.criterion")
        self.validate()

    def validate(self) -> None:
        if not self.A > 0:
            raise ConfigError("A 必须 > 0", config_key="graft.A")
        if not self.c > 0:
            raise ConfigError("c 必须 > 0", config_key="graft.c")
        if not 0 < self.noise_decay_a < 1:
            raise ConfigError("noise_decay_a 必须在 (0, 1) 内", config_key="graft.noise_decay_a")
        if self.invalid_threshold_gamma < 0:
            raise ConfigError("invalid_threshold_gamma 必须 >= 0", config_key="graft.invalid_threshold_gamma")
        if not 0 < self.alpha_clamp_epsilon < 0.5:
            raise ConfigError("alpha_clamp_epsilon 必须在 (0, 0.5) 内", config_key="graft.alpha_clamp_epsilon")
        if self.bin_count < 2:
            raise ConfigError("bin_count 必须 >= 2", config_key="graft.bin_count")
        if self.graft_period_iters is not None and self.graft_period_iters < 1:
            raise ConfigError("graft_period_iters 必须 >= 1", config_key="graft.graft_period_iters")
        if self.internal_mode not in INTERNAL_MODES:
            raise ConfigError(f"internal_mode 必须是 {INTERNAL_MODES} 之一", config_key="graft.internal_mode")

    @property
    def histogram(self) -> HistogramSpec:
        return HistogramSpec(bin_count=self.bin_count)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scion_source": self.scion_source.value,
            "criterion": self.criterion.value,
            "A": self.A,
            "c": self.c,
            "bin_count": self.bin_count,
            "invalid_threshold_gamma": self.invalid_threshold_gamma,
            "noise_decay_a": self.noise_decay_a,
            "graft_period_iters": self.graft_period_iters,
            "alpha_clamp_epsilon": self.alpha_clamp_epsilon,
            "enabled": self.enabled,
            "graft_dense": self.graft_dense,
            "internal_mode": self.internal_mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GraftConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"未知的嫁接配置项: {sorted(unknown)}", config_key=f"graft.{sorted(unknown)[0]}")
        return cls(**dict(data))


@dataclass(frozen=True)
class GraftEvent:
    """一次层级嫁接的审计记录"""
    epoch: int
    layer_name: str
    alpha: float
    H_self: float
    H_other: float
    source_network: int
    network_id: int = -1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "network_id": self.network_id,
            "source_network": self.source_network,
            "layer_name": self.layer_name,
            "alpha": self.alpha,
            "H_self": self.H_self,
            "H_other": self.H_other,
        }


# ----------------------------------------------------------------------
# 自适应系数
# ----------------------------------------------------------------------

def raw_alpha(delta: float, A: float, c: float) -> float:
    """截断前的系数 A·arctan(c·ΔH) + 0.5"""
    return A * math.atan(c * delta) + 0.5


def adaptive_alpha(H_self: float, H_other: float, cfg: GraftConfig) -> float:
    """
    接收方自身权重的系数 α

    Args:
        H_self: 接收方该层的信息量
        H_other: 接穗方该层的信息量
        cfg: 提供 A、c 与截断 ε

    Returns:
        [ε, 1−ε] 内的 α；两侧信息量相等时恰为 0.5
    """
    eps = cfg.alpha_clamp_epsilon
    return min(max(raw_alpha(H_self - H_other, cfg.A, cfg.c), eps), 1.0 - eps)


def graft_layer(w_self: np.ndarray, w_other: np.ndarray, alpha: float) -> np.ndarray:
    """α·w_self + (1−α)·w_other，返回新数组"""
    if w_self.shape != w_other.shape:
        raise ValidationError("嫁接双方形状不一致", field="shape", value=(w_self.shape, w_other.shape))
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha 必须在 [0, 1] 内", field="alpha", value=alpha)
    return alpha * w_self + (1.0 - alpha) * w_other


# ----------------------------------------------------------------------
# 外部接穗
# ----------------------------------------------------------------------

def _graftable(params: Mapping[str, np.ndarray], graft_dense: bool) -> List[str]:
    """驱动准则的权重名: 卷积权重，以及（可选）全连接权重"""
    names = []
    for name, tensor in params.items():
        if not name.endswith(".weight"):
            continue
        if tensor.ndim == 4 or (graft_dense and tensor.ndim == 2):
            names.append(name)
    return names


def _check_congruent(params: Mapping[str, np.ndarray], other: Mapping[str, np.ndarray]) -> None:
    if list(params.keys()) != list(other.keys()):
        raise ConfigError("嫁接双方的参数名不一致", config_key="parameters")
    for name, tensor in params.items():
        if tensor.shape != other[name].shape:
            raise ConfigError(f"嫁接双方的参数形状不一致: {tensor.shape} != {other[name].shape}", config_key=name)


def graft_pair(
    net_self: Union[Network, MutableMapping[str, np.ndarray]],
    other_snapshot: Mapping[str, np.ndarray],
    cfg: GraftConfig,
    epoch: int = 0,
    source_network: int = -1,
    network_id: int = -1
) -> List[GraftEvent]:
    """
    用另一网络的快照对接收方做层级嫁接（原地修改接收方）

    每层统一按 β·w_高信息侧 + (1−β)·w_低信息侧 计算，β = adaptive_alpha(H_高, H_低)，
    两个网络互相嫁接时得到逐位相同的结果。偏置随其权重使用同一组合。

    Args:
        net_self: 接收方网络或其参数视图
        other_snapshot: 接穗方参数快照（只读）
        cfg: 嫁接配置
        epoch: 记录到事件中的 epoch
        source_network: 接穗方编号
        network_id: 接收方编号

    Returns:
        每层一个 GraftEvent
    """
    params = net_self.parameters() if isinstance(net_self, Network) else net_self
    _check_congruent(params, other_snapshot)
    spec = cfg.histogram

    events: List[GraftEvent] = []
    for name in _graftable(params, cfg.graft_dense):
        own = params[name]
        peer = other_snapshot[name]
        h_self = layer_information(own, cfg.criterion, spec)
        h_other = layer_information(peer, cfg.criterion, spec)
        alpha = adaptive_alpha(h_self, h_other, cfg)
        self_dominant = h_self >= h_other
        beta = alpha if self_dominant else adaptive_alpha(h_other, h_self, cfg)

        bias_name = name[:-len("weight")] + "bias"
        targets = [name] + ([bias_name] if bias_name in params else [])
        for target in targets:
            if self_dominant:
                grafted = graft_layer(params[target], other_snapshot[target], beta)
            else:
                grafted = graft_layer(other_snapshot[target], params[target], beta)
            params[target][...] = grafted

        events.append(GraftEvent(
            epoch=epoch,
            layer_name=name[:-len(".weight")],
            alpha=alpha,
            H_self=h_self,
            H_other=h_other,
            source_network=source_network,
            network_id=network_id,
        ))
        logger.debug(
            f"嫁接 net{network_id} <- net{source_network} {name}: "
            f"H_self={h_self:.6f} H_other={h_other:.6f} α={alpha:.6f}"
        )
    return events


# ----------------------------------------------------------------------
# 噪声接穗
# ----------------------------------------------------------------------

def noise_sigma(epoch: int, noise_decay_a: float) -> float:
    """σ_t = a^t，t 取 epoch 序号"""
    return float(noise_decay_a ** epoch)


def sample_noise(shape: Tuple[int, ...], sigma: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, sigma, size=shape)


def noise_graft(net: Network, epoch: int, cfg: GraftConfig, rng_seed: int) -> List[FilterId]:
    """
    给所有 l1 < γ 的卷积滤波器加 N(0, σ_t²) 噪声

    有效滤波器逐位不变；结果由 rng_seed 唯一决定。

    Returns:
        被修改滤波器的 (层名, 滤波器序号) 列表
    """
    sigma = noise_sigma(epoch, cfg.noise_decay_a)
    rng = np.random.default_rng(rng_seed)
    modified: List[FilterId] = []
    for layer in net.conv_layers():
        norms = filter_l1_norms(layer)
        layer_name = layer.name[:-len(".weight")]
        for j in np.flatnonzero(norms < cfg.invalid_threshold_gamma):
            layer.tensor[j] += sample_noise(layer.tensor[j].shape, sigma, rng)
            modified.append((layer_name, int(j)))
    if modified:
        logger.debug(f"噪声嫁接: epoch={epoch} σ={sigma:.6g}，修改 {len(modified)} 个滤波器")
    return modified


# ----------------------------------------------------------------------
# 内部接穗
# ----------------------------------------------------------------------

def internal_graft(layer: ConvLayerWeights, gamma: float, mode: str = "additive") -> List[GraftPair]:
    """
    把第 i 大的滤波器嫁接到第 i 小的滤波器上（i = 1..m，m 为 l1 < γ 的滤波器数）

    l1 相同时序号小者在前；捐献方取嫁接前的数值，捐献方本身不变。
    additive 模式做加法，replace 模式直接替换。

    Returns:
        (donor_index, recipient_index) 列表
    """
    if mode not in INTERNAL_MODES:
        raise ValidationError(f"未知的内部嫁接模式: {mode}", field="mode", value=mode)
    norms = filter_l1_norms(layer)
    n_out = layer.num_filters
    ascending = sorted(range(n_out), key=lambda j: (norms[j], j))
    descending = sorted(range(n_out), key=lambda j: (-norms[j], j))
    m = int((norms < gamma).sum())
    if m > n_out / 2:
        logger.warning(f"{layer.name}: {m}/{n_out} 个滤波器无效，捐献方与接收方重叠")

    original = layer.tensor.copy()
    pairs: List[GraftPair] = []
    for recipient, donor in zip(ascending[:m], descending[:m]):
        if donor == recipient:
            continue
        if mode == "additive":
            layer.tensor[recipient] += original[donor]
        else:
            layer.tensor[recipient] = original[donor]
        pairs.append((donor, recipient))
    return pairs


def internal_graft_network(net: Network, cfg: GraftConfig) -> Dict[str, List[GraftPair]]:
    """对每个卷积层做内部嫁接"""
    result: Dict[str, List[GraftPair]] = {}
    for layer in net.conv_layers():
        pairs = internal_graft(layer, cfg.invalid_threshold_gamma, cfg.internal_mode)
        if pairs:
            result[layer.name[:-len(".weight")]] = pairs
    return result
