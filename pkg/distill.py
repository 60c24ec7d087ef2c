"""
知识蒸馏模块

温度 softmax、多教师概率平均、KD 损失（带 τ² 因子）以及学生总损失
L = CE + kd_weight · L_KD。两种损失都按批次均值归约。
"""
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ConfigError, ValidationError
from nn_core import log_softmax, softmax, softmax_cross_entropy


@dataclass
class DistillConfig:
    temperature: float = 2.0
    kd_weight: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature 必须 > 0", config_key="distill.temperature")
        if self.kd_weight < 0:
            raise ConfigError("kd_weight 必须 >= 0", config_key="distill.kd_weight")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"未知的蒸馏配置项: {sorted(unknown)}", config_key=f"distill.{sorted(unknown)[0]}")
        return cls(**dict(data))


@dataclass
class SoftTargets:
    """按温度 τ 计算的概率，每行和为 1"""
    probs: np.ndarray
    temperature: float


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValidationError("温度必须 > 0", field="tau", value=tau)


def temperature_softmax(logits: np.ndarray, tau: float) -> SoftTargets:
    """softmax(logits / τ)，逐行减去最大值保证数值稳定"""
    _check_tau(tau)
    return SoftTargets(probs=softmax(np.asarray(logits, dtype=np.float64) / tau), temperature=tau)


def teacher_average(teacher_probs: Sequence[Union[np.ndarray, SoftTargets]]) -> np.ndarray:
    """
    M 个教师概率的逐元素均值

    Raises:
        ValidationError: 列表为空或形状不一致
    """
    if len(teacher_probs) == 0:
        raise ValidationError("教师列表为空", field="teacher_probs", value=0)
    arrays = [t.probs if isinstance(t, SoftTargets) else np.asarray(t, dtype=np.float64) for t in teacher_probs]
    shape = arrays[0].shape
    for probs in arrays[1:]:
        if probs.shape != shape:
            raise ValidationError("教师概率形状不一致", field="shape", value=(shape, probs.shape))
    return np.mean(np.stack(arrays), axis=0)


def kd_loss(student_logits: np.ndarray, teacher_avg: np.ndarray, tau: float) -> float:
    """τ² · mean_i( −Σ_k p̄_k(x_i) · log softmax(z_i / τ)_k )"""
    return kd_loss_and_grad(student_logits, teacher_avg, tau)[0]


def kd_loss_and_grad(student_logits: np.ndarray, teacher_avg: np.ndarray, tau: float) -> Tuple[float, np.ndarray]:
    """
    KD 损失及其对学生 logits 的梯度

    梯度 = τ/N · (q · Σ_k p̄_k − p̄)，q = softmax(z / τ)；教师概率视为常数。
    """
    _check_tau(tau)
    z = np.asarray(student_logits, dtype=np.float64)
    target = np.asarray(teacher_avg, dtype=np.float64)
    if z.shape != target.shape or z.ndim != 2:
        raise ValidationError("学生 logits 与教师概率形状不一致", field="shape", value=(z.shape, target.shape))
    n = z.shape[0]
    if n == 0:
        raise ValidationError("批次为空", field="batch_size", value=0)

    log_q = log_softmax(z / tau)
    loss = float(tau * tau * -(target * log_q).sum(axis=1).mean())
    grad = tau / n * (np.exp(log_q) * target.sum(axis=1, keepdims=True) - target)
    return loss, grad


def student_total_loss(
    student_logits: np.ndarray,
    labels: np.ndarray,
    teacher_avg: Optional[np.ndarray],
    cfg: DistillConfig
) -> Tuple[float, float, float]:
    """返回 (total, ce_part, kd_part)；没有教师时 kd_part = 0"""
    total, ce, kd, _ = student_total_loss_and_grad(student_logits, labels, teacher_avg, cfg)
    return total, ce, kd


def student_total_loss_and_grad(
    student_logits: np.ndarray,
    labels: np.ndarray,
    teacher_avg: Optional[np.ndarray],
    cfg: DistillConfig
) -> Tuple[float, float, float, np.ndarray]:
    """返回 (total, ce_part, kd_part, dtotal/dlogits)"""
    ce, grad = softmax_cross_entropy(student_logits, labels)
    kd = 0.0
    if teacher_avg is not None:
        kd, kd_grad = kd_loss_and_grad(student_logits, teacher_avg, cfg.temperature)
        if cfg.kd_weight:
            grad = grad + cfg.kd_weight * kd_grad
    return ce + cfg.kd_weight * kd, ce, kd, grad
