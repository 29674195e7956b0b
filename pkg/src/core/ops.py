"""
src/core/ops.py
可微分运算

每个运算返回新的 Tensor；若梯度模式开启且任一输入 requires_grad，则在输出上记录
(输入, 反向闭包)。反向闭包只捕获 numpy 数组，不捕获 Tensor，避免引用环。
"""

import logging
import math
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from src.common.constants import LAYER_NORM_EPS
from src.common.exceptions import ContractError, DimensionError, IndexRangeError
from src.core.tensor import (
    Tensor, TapeNode, enable_grad, is_grad_enabled, no_grad, run_backward,
)

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable,
            op: str, force: bool = False) -> Tensor:
    requires = is_grad_enabled() and (force or any(p.requires_grad for p in parents))
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._node = TapeNode(parents, backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """将广播后的梯度求和回原始形状"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: 形状 {a.shape} 与 {b.shape} 无法广播")


# ==================== 逐元素运算 ====================

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

    return _record(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        return unbroadcast(g, a_shape), unbroadcast(-g, b_shape)

    return _record(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return unbroadcast(g * b_data, a_data.shape), unbroadcast(g * a_data, b_data.shape)

    return _record(a_data * b_data, (a, b), backward_fn, "mul")


def scale(x: Tensor, c: Scalar) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _record(x.data * x.dtype.type(c), (x,), backward_fn, "scale")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # sign(0) = 0，即零点次梯度取 0
    sign = np.sign(x.data)

    def backward_fn(g):
        return (g * sign,)

    return _record(np.abs(x.data), (x,), backward_fn, "abs")


def clamp(x: Tensor, low: Optional[Scalar] = None, high: Optional[Scalar] = None) -> Tensor:
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high

    def backward_fn(g):
        return (g * inside,)

    return _record(np.clip(x.data, low, high), (x,), backward_fn, "clamp")


def gelu(x: Tensor) -> Tensor:
    """精确 erf 形式 GELU: x·Φ(x)"""
    x_data = x.data
    cdf = 0.5 * (1.0 + erf(x_data * _INV_SQRT_2))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT_2PI
        return (g * (cdf + x_data * pdf),)

    return _record((x_data * cdf).astype(x.dtype, copy=False), (x,), backward_fn, "gelu")


# ==================== 规约 ====================

def _normalize_axes(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """求和 (双精度累加，存储精度输出)"""
    shape = x.shape
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def backward_fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(data), (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError("mean: 规约维度为空")
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ==================== 线性代数 ====================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) · (..., k, n) -> (..., m, n)"""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul 需要至少二维输入，实际 {a.shape} 与 {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul 内维不一致: {a.shape} · {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul 批维不一致: {a.shape} · {b.shape}")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b_data, -1, -2)
        gb = np.swapaxes(a_data, -1, -2) @ g
        return unbroadcast(ga, a_data.shape), unbroadcast(gb, b_data.shape)

    return _record(a_data @ b_data, (a, b), backward_fn, "matmul")


# ==================== 归一化 ====================

def softmax_lastdim(x: Tensor) -> Tensor:
    """最后一维 softmax，减最大值保证数值稳定"""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: 最后一维为空，形状 {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record(s, (x,), backward_fn, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax: 最后一维为空，形状 {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = shifted - log_z
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    逐行 LayerNorm：零均值单位方差后做仿射

    Raises:
        DimensionError: 最后一维为 0，或 gain/bias 形状不是 (d,)
        ContractError: eps <= 0
    """
    if eps <= 0:
        raise ContractError(f"layer_norm: eps 必须 > 0，实际 {eps}")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: 特征维为空，形状 {x.shape}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias 需为 ({d},)，实际 {gain.shape}/{bias.shape}")

    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = x.data - mu.astype(x.dtype)
    var = (centered.astype(np.float64) ** 2).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * rstd
    gain_data = gain.data
    out = xhat * gain_data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gxhat = g * gain_data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _record(out, (x, gain, bias), backward_fn, "layer_norm")


# ==================== 索引与形状 ====================

def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """
    按行收集: out[..., i, j, :] = x[..., index[i, j], :]

    Args:
        x: (..., N, d)
        index: 整数数组 (R, M)

    Returns:
        (..., R, M, d)；反向为 scatter-add
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise DimensionError(f"gather_rows: 索引必须是整数，实际 {index.dtype}")
    if index.ndim != 2:
        raise DimensionError(f"gather_rows: 索引需为二维 (R, M)，实际 {index.shape}")
    if x.ndim < 2:
        raise DimensionError(f"gather_rows: 输入需为 (..., N, d)，实际 {x.shape}")
    n = x.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexRangeError(
            f"gather_rows: 索引越界，取值范围 [{index.min()}, {index.max()}]，行数 {n}")

    x_shape = x.shape
    out = x.data[..., index, :]

    def backward_fn(g):
        lead = x_shape[:-2]
        d = x_shape[-1]
        flat = g.reshape((-1,) + index.shape + (d,))
        gx = np.zeros((flat.shape[0], n, d), dtype=g.dtype)
        for j in range(index.shape[1]):
            col = index[:, j]
            if np.unique(col).size == col.size:
                gx[:, col, :] += flat[:, :, j, :]
            else:
                np.add.at(gx, (slice(None), col), flat[:, :, j, :])
        return (gx.reshape(lead + (n, d)),)

    return _record(out, (x,), backward_fn, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: 输入为空")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat: 形状不兼容 {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _record(data, tuple(tensors), backward_fn, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """沿某一维切片 [start, stop)；用于截取通道段"""
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise DimensionError(f"slice_axis: 区间 [{start}, {stop}) 超出维度 {x.shape[ax]}")
    key = (slice(None),) * ax + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[key] = g
        return (gx,)

    return _record(x.data[key], (x,), backward_fn, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: 无法将 {x.shape} 变形为 {shape}")
    original = x.shape

    def backward_fn(g):
        return (g.reshape(original),)

    return _record(data, (x,), backward_fn, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: 轴序 {axes} 不是 {x.ndim} 维的排列")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _record(np.transpose(x.data, axes), (x,), backward_fn, "permute")


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """沿 axis 将每个元素连续复制 repeats 次"""
    ax = axis % x.ndim
    shape = x.shape

    def backward_fn(g):
        split = shape[:ax] + (shape[ax], repeats) + shape[ax + 1:]
        return (g.reshape(split).sum(axis=ax + 1),)

    return _record(np.repeat(x.data, repeats, axis=ax), (x,), backward_fn, "repeat")


# ==================== 损失 ====================

def l1(a: Tensor, b) -> Tensor:
    """‖a − b‖₁ (对所有元素求和)"""
    return sum(abs(sub(a, b)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """批平均 softmax 交叉熵；labels 为整数类别"""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} 与 labels {labels.shape} 不匹配")
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[np.arange(labels.size), labels] = 1.0
    return scale(sum(mul(log_softmax_lastdim(logits), Tensor(one_hot))), -1.0 / labels.size)


# ==================== 梯度检查点 ====================

def checkpoint(fn: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """
    前向在 no_grad 下执行，只保留段边界；反向时重算 fn 并从上游梯度继续回传。
    fn 内的参数梯度在重算回传时直接累加到叶子上。fn 必须对同一输入确定。
    """
    if not is_grad_enabled():
        return fn(x)
    with no_grad():
        out_data = fn(x).data
    x_data = x.data

    def backward_fn(g):
        with enable_grad():
            x_leaf = Tensor(x_data, requires_grad=True)
            recomputed = fn(x_leaf)
            run_backward(recomputed, g)
        gx = x_leaf.grad if x_leaf.grad is not None else np.zeros_like(x_data)
        return (gx,)

    return _record(out_data, (x,), backward_fn, "checkpoint", force=True)
