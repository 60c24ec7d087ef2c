"""
工具函数模块

包含项目中使用的各种工具函数。
"""
from typing import List

import numpy as np


def format_duration(seconds: float) -> str:
    """
    格式化时间显示

    Args:
        seconds: 秒数

    Returns:
        格式化后的时间字符串，如 "1:23:45" 或 "45s"
    """
    if seconds < 60:
        return f"{int(seconds)}s"
    elif seconds < 3600:
        minutes = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{minutes}:{secs:02d}"
    else:
        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        secs = int(seconds % 60)
        return f"{hours}:{minutes:02d}:{secs:02d}"


def parse_float_list(text: str, field: str = "values") -> List[float]:
    """
    解析逗号分隔的实数列表（如 "1e-3,1e-1"）

    Raises:
        ValidationError: 如果格式无效或列表为空
    """
    from exceptions import ValidationError

    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ValidationError("列表不能为空", field=field, value=text)
    try:
        return [float(item) for item in items]
    except ValueError:
        raise ValidationError("无效的数值列表", field=field, value=text)


def derive_seed(*parts: int) -> int:
    """
    由若干整数派生一个确定性的 64 位种子

    相同的输入总是得到相同的种子，不依赖任何全局随机状态。
    """
    sequence = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def threshold_label(threshold: float) -> str:
    """把阈值格式化为列名片段，例如 0.001 -> "1e-3" """
    mantissa, exponent = f"{threshold:e}".split('e')
    mantissa = mantissa.rstrip('0').rstrip('.')
    return f"{mantissa}e{int(exponent)}"
