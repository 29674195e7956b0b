"""
src/core/gradcheck.py
中心差分梯度检查
"""

from typing import Callable, Dict, Sequence

import numpy as np

from src.core.tensor import Tensor, backward, no_grad


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-3) -> np.ndarray:
    """对 tensor 的每个元素做中心差分；fn 无参数，返回标量 Tensor"""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    if not tensor.data.flags.c_contiguous or not tensor.data.flags.writeable:
        tensor.data = np.array(tensor.data, order="C")
    flat = tensor.data.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            plus = float(fn().data.sum())
            flat[k] = original - step
            minus = float(fn().data.sum())
            flat[k] = original
            grad.reshape(-1)[k] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """逐元素 |a − n| / max(|a|, |n|, floor) 的最大值"""
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    step: float = 1e-3, floor: float = 1e-2) -> Dict[str, float]:
    """
    比较梯度带梯度与中心差分

    Args:
        fn: 闭包，每次调用重新构建前向并返回标量损失
        tensors: 被检查的叶子 (需 requires_grad，且 data 可写)

    Returns:
        {名称或序号: 最大相对误差}
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    errors = {}
    for k, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numerical_gradient(fn, t, step)
        errors[t.name or str(k)] = relative_error(analytic, numeric, floor)
    return errors
