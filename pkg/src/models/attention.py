"""
src/models/attention.py
空间局部多头自注意力

每个细胞只关注其 N_H×N_W 邻域：通过预计算的索引表收集邻域的 K、V 行，
代价 O(N·M·d)，不构造 N×N 注意力矩阵。
"""

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np

from src.common.exceptions import ContractError, DimensionError, IndexRangeError
from src.core import ops
from src.core.tensor import Tensor

logger = logging.getLogger(__name__)

AttentionSink = Callable[[np.ndarray], None]


def build_neighborhood_index(grid_h: int, grid_w: int, window_h: int, window_w: int,
                             boundary: str = "wrap") -> np.ndarray:
    """
    邻域索引表 (N, M)

    第 i 行按左上到右下的顺序列出细胞 i 邻域内各细胞的展平序号。
    wrap: 环面取模；zero-pad: 越界位置记为 N (指向补零行)

    Raises:
        ContractError: 窗口边长为偶数、M > N 或未知边界模式
    """
    if window_h % 2 == 0 or window_w % 2 == 0 or window_h < 1 or window_w < 1:
        raise ContractError(f"邻域窗口必须为正奇数，实际 {window_h}x{window_w}")
    num = grid_h * grid_w
    if window_h * window_w > num:
        raise ContractError(f"邻域大小 M={window_h * window_w} 超过细胞数 N={num}")
    if boundary not in ("wrap", "zero-pad"):
        raise ContractError(f"未知边界模式 {boundary}")

    rows, cols = np.divmod(np.arange(num), grid_w)
    dy, dx = np.meshgrid(np.arange(-(window_h // 2), window_h // 2 + 1),
                         np.arange(-(window_w // 2), window_w // 2 + 1), indexing="ij")
    ny = rows[:, None] + dy.reshape(-1)[None, :]
    nx = cols[:, None] + dx.reshape(-1)[None, :]
    if boundary == "wrap":
        return (np.mod(ny, grid_h) * grid_w + np.mod(nx, grid_w)).astype(np.int64)
    inside = (ny >= 0) & (ny < grid_h) & (nx >= 0) & (nx < grid_w)
    return np.where(inside, ny * grid_w + nx, num).astype(np.int64)


def _pad_zero_row(x: Tensor) -> Tensor:
    zeros = Tensor(np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype))
    return ops.concat([x, zeros], axis=-2)


def localized_attention(q: Tensor, k: Tensor, v: Tensor, index: np.ndarray, scale: float,
                        sink: Optional[AttentionSink] = None) -> Tensor:
    """
    A*[i,j] = softmax_j(Q[i]·K[index[i,j]] / scale)，out[i] = Σ_j A*[i,j]·V[index[i,j]]

    Args:
        q, k, v: (..., N, d_h)
        index: (N, M)；取值 N 表示补零邻居
        scale: 分母 (如 √(d/h))
        sink: 可选回调，接收注意力权重 (..., N, M)
    """
    num = q.shape[-2]
    if index.shape[0] != num:
        raise DimensionError(f"索引表行数 {index.shape[0]} 与细胞数 {num} 不一致")
    if index.size and (index.min() < 0 or index.max() > num):
        raise IndexRangeError(f"邻域索引越界: [{index.min()}, {index.max()}]，细胞数 {num}")
    if index.size and index.max() == num:
        k, v = _pad_zero_row(k), _pad_zero_row(v)

    keys = ops.gather_rows(k, index)          # (..., N, M, d_h)
    values = ops.gather_rows(v, index)
    query = ops.reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    logits = ops.scale(ops.sum(ops.mul(query, keys), axis=-1), 1.0 / scale)   # (..., N, M)
    weights = ops.softmax_lastdim(logits)
    if sink is not None:
        sink(weights.data)
    weighted = ops.mul(ops.reshape(weights, weights.shape + (1,)), values)
    return ops.sum(weighted, axis=-2)


def neighbor_counts(index: np.ndarray) -> np.ndarray:
    """稠密邻接计数矩阵 (N, N 或 N+1)，count[i, j] = 行 i 中 j 出现的次数"""
    num = index.shape[0]
    width = num + 1 if index.size and index.max() == num else num
    counts = np.zeros((num, width))
    np.add.at(counts, (np.repeat(np.arange(num), index.shape[1]), index.reshape(-1)), 1.0)
    return counts


def masked_global_attention(q: Tensor, k: Tensor, v: Tensor, index: np.ndarray,
                            scale: float) -> Tensor:
    """
    全局注意力加带状掩码 (邻域外 -∞)，作为局部注意力的对照实现

    邻居重复出现时按次数加权 (加 log 计数)，与收集实现逐项一致
    """
    counts = neighbor_counts(index)
    if counts.shape[1] > q.shape[-2]:
        k, v = _pad_zero_row(k), _pad_zero_row(v)
    with np.errstate(divide="ignore"):
        bias = Tensor(np.log(counts).astype(q.dtype))
    logits = ops.scale(ops.matmul(q, ops.permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                       1.0 / scale)
    weights = ops.softmax_lastdim(ops.add(logits, bias))
    return ops.matmul(weights, v)


def attention_scale(embed_dim: int, heads: int, mode: str = "per-head") -> float:
    """per-head: √(d/h)；full: √d"""
    if mode == "per-head":
        return math.sqrt(embed_dim / heads)
    if mode == "full":
        return math.sqrt(embed_dim)
    raise ContractError(f"未知注意力缩放方式 {mode}")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, d) -> (B, h, N, d/h)"""
    batch, num, dim = x.shape
    if dim % heads:
        raise DimensionError(f"嵌入维度 {dim} 不能被头数 {heads} 整除")
    return ops.permute(ops.reshape(x, (batch, num, heads, dim // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, N, d/h) -> (B, N, d)"""
    batch, heads, num, head_dim = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 1, 3)), (batch, num, heads * head_dim))


def head_mask_tensor(heads: int, masked_heads: Sequence[int], dtype) -> Tensor:
    """被屏蔽的头乘 0，其余乘 1；形状 (1, h, 1, 1)"""
    keep = np.ones((1, heads, 1, 1), dtype=dtype)
    for head in masked_heads:
        if not 0 <= head < heads:
            raise IndexRangeError(f"头序号 {head} 超出范围 [0, {heads})")
        keep[0, head] = 0.0
    return Tensor(keep)


def mhsa_localized(tokens: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, b_o: Tensor,
                   index: np.ndarray, heads: int, scale: float,
                   masked_heads: Sequence[int] = (), sink: Optional[AttentionSink] = None,
                   global_oracle: bool = False) -> Tensor:
    """
    多头局部自注意力：每头在各自投影上做局部注意力，拼接后经 W 投影

    Args:
        tokens: (B, N, d)
        w_q, w_k, w_v: (d, d)，第 i 头使用第 i 个 d/h 列块
        w_o, b_o: 输出投影
        masked_heads: 拼接前置零的头
        global_oracle: 改用带状掩码全局注意力
    """
    dim = tokens.shape[-1]
    if dim % heads:
        raise DimensionError(f"嵌入维度 {dim} 不能被头数 {heads} 整除")
    q = split_heads(ops.matmul(tokens, w_q), heads)
    k = split_heads(ops.matmul(tokens, w_k), heads)
    v = split_heads(ops.matmul(tokens, w_v), heads)
    if global_oracle:
        attended = masked_global_attention(q, k, v, index, scale)
    else:
        attended = localized_attention(q, k, v, index, scale, sink=sink)
    if masked_heads:
        attended = ops.mul(attended, head_mask_tensor(heads, masked_heads, attended.dtype))
    return ops.add(ops.matmul(merge_heads(attended), w_o), b_o)
