"""
梯度检查

用中心差分逐个元素验证 Network.backward 给出的解析梯度。
若 ±ε 扰动改变了 ReLU 掩码或池化位置（跨过不可微点），该元素跳过并计数。

相对误差为 |g_a − g_n| / max(|g_a|, |g_n|, RELATIVE_ERROR_FLOOR)。
两侧梯度都小于 1e-3 的元素因此按绝对误差判定: 容差 1e-5 对它们意味着
|g_a − g_n| < 1e-8，比纯相对误差宽松；gradient_check(floor=0.0) 退回纯相对误差。
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from exceptions import ValidationError
from logger import get_logger
from nn_core import Network, softmax_cross_entropy

logger = get_logger()

# 返回 (loss, dloss/dlogits)
LossFunction = Callable[[np.ndarray], Tuple[float, np.ndarray]]

# 相对误差分母下限；低于它的梯度按绝对误差比较
RELATIVE_ERROR_FLOOR = 1e-3


@dataclass
class ParameterCheck:
    name: str
    max_relative_error: float
    max_absolute_error: float
    checked: int
    skipped_kinks: int
    flagged: bool


@dataclass
class GradientCheckReport:
    tolerance: float
    epsilon: float
    entries: List[ParameterCheck] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((e.max_relative_error for e in self.entries), default=0.0)

    @property
    def flagged(self) -> List[str]:
        return [e.name for e in self.entries if e.flagged]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def format_table(self) -> str:
        lines = [f"{'parameter':<16} {'checked':>8} {'skipped':>8} {'max_rel_err':>12}  status"]
        for e in self.entries:
            status = "FLAG" if e.flagged else "ok"
            lines.append(
                f"{e.name:<16} {e.checked:>8d} {e.skipped_kinks:>8d} {e.max_relative_error:>12.3e}  {status}"
            )
        lines.append(f"tolerance={self.tolerance:g} epsilon={self.epsilon:g} max={self.max_relative_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_ERROR_FLOOR) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale if scale > 0 else 0.0


def _same_signature(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    net: Network,
    batch: np.ndarray,
    labels: Optional[np.ndarray] = None,
    tolerance: float = 1e-5,
    epsilon: float = 1e-6,
    loss_fn: Optional[LossFunction] = None,
    floor: float = RELATIVE_ERROR_FLOOR
) -> GradientCheckReport:
    """
    比较 backward() 与中心差分

    Args:
        net: 待检查的网络（检查结束后参数恢复原值）
        batch: 输入批次
        labels: 标签；未提供 loss_fn 时使用 softmax 交叉熵
        tolerance: 相对误差容差，未严格小于它的参数被标记
        epsilon: 差分步长
        loss_fn: 自定义损失，输入 logits，返回 (loss, dloss/dlogits)
        floor: 相对误差分母下限

    Returns:
        每个参数的最大相对误差报告
    """
    if loss_fn is None:
        if labels is None:
            raise ValidationError("未提供 loss_fn 时必须提供 labels", field="labels")
        fixed_labels = labels

        def _cross_entropy(logits: np.ndarray) -> Tuple[float, np.ndarray]:
            return softmax_cross_entropy(logits, fixed_labels)

        loss_fn = _cross_entropy

    _, dlogits = loss_fn(net.forward(batch))
    baseline = [sig.copy() for sig in net.activation_signature()]
    analytic = {name: g.copy() for name, g in net.backward(dlogits).items()}

    report = GradientCheckReport(tolerance=tolerance, epsilon=epsilon)
    for name, weight in net.parameters().items():
        worst_rel = 0.0
        worst_abs = 0.0
        checked = 0
        skipped = 0
        for index in np.ndindex(weight.shape):
            original = weight[index]

            weight[index] = original + epsilon
            loss_plus = loss_fn(net.forward(batch))[0]
            crossed = not _same_signature(baseline, net.activation_signature())

            weight[index] = original - epsilon
            loss_minus = loss_fn(net.forward(batch))[0]
            crossed = crossed or not _same_signature(baseline, net.activation_signature())

            weight[index] = original
            if crossed:
                skipped += 1
                continue

            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            exact = float(analytic[name][index])
            worst_rel = max(worst_rel, relative_error(exact, numeric, floor))
            worst_abs = max(worst_abs, abs(exact - numeric))
            checked += 1

        report.entries.append(ParameterCheck(
            name=name,
            max_relative_error=worst_rel,
            max_absolute_error=worst_abs,
            checked=checked,
            skipped_kinks=skipped,
            flagged=not worst_rel < tolerance,
        ))

    # 用未扰动的参数重新前向，恢复各层缓存
    net.forward(batch)
    if report.flagged:
        logger.warning(f"梯度检查未通过: {', '.join(report.flagged)}")
    else:
        logger.debug(f"梯度检查通过，最大相对误差 {report.max_relative_error:.3e}")
    return report
