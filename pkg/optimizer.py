"""
优化器模块

带动量和权重衰减的 SGD，以及阶梯式学习率衰减。
"""
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Mapping, MutableMapping, Optional, Tuple

import numpy as np

from exceptions import ConfigError, ValidationError


@dataclass
class TrainerConfig:
    """单个网络的训练超参数 λ_k"""
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    lr_decay_factor: float = 0.1
    lr_decay_period_epochs: int = 20
    seed: int = 0
    shuffle_seed: Optional[int] = None  # 默认与 seed 相同
    augment: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate 必须 > 0", config_key="learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum 必须在 [0, 1) 内", config_key="momentum")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay 必须 >= 0", config_key="weight_decay")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor 必须在 (0, 1] 内", config_key="lr_decay_factor")
        if self.lr_decay_period_epochs < 1:
            raise ConfigError("lr_decay_period_epochs 必须 >= 1", config_key="lr_decay_period_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须 >= 1", config_key="batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs 必须 >= 1", config_key="epochs")

    @property
    def loader_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"未知的训练配置项: {sorted(unknown)}", config_key=sorted(unknown)[0])
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ConfigError(f"训练配置无效: {e}", config_key="trainer")

    def with_overrides(self, **changes: Any) -> "TrainerConfig":
        return replace(self, **changes)


def effective_learning_rate(config: TrainerConfig, epoch: int) -> float:
    """lr · factor^floor(epoch / period)，关于 epoch 单调不增"""
    return config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_period_epochs)


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: MutableMapping[str, np.ndarray],
    config: TrainerConfig,
    epoch: int
) -> Tuple[MutableMapping[str, np.ndarray], MutableMapping[str, np.ndarray]]:
    """
    原地执行一步 SGD

        g <- grad + weight_decay * w
        v <- momentum * v + g
        w <- w - lr_eff * v

    velocity 中缺失的条目按零初始化。返回 (params, velocity)。
    """
    if list(params.keys()) != list(grads.keys()):
        raise ValidationError("参数与梯度的名称不一致", field="grads")
    lr = effective_learning_rate(config, epoch)
    for name, weight in params.items():
        grad = grads[name]
        if grad.shape != weight.shape:
            raise ValidationError("梯度形状与参数不一致", field=name, value=grad.shape)
        if config.weight_decay:
            grad = grad + config.weight_decay * weight
        buf = velocity.get(name)
        if buf is None:
            buf = np.zeros_like(weight)
            velocity[name] = buf
        elif buf.shape != weight.shape:
            raise ValidationError("动量缓冲形状与参数不一致", field=name, value=buf.shape)
        buf *= config.momentum
        buf += grad
        weight -= lr * buf
    return params, velocity


class SGD:
    """持有动量缓冲的 SGD 优化器；嫁接只改写参数，不触碰这里的缓冲"""

    def __init__(self, config: TrainerConfig):
        self.config = config
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], epoch: int) -> None:
        sgd_step(params, grads, self.velocity, self.config, epoch)

    def learning_rate(self, epoch: int) -> float:
        return effective_learning_rate(self.config, epoch)
