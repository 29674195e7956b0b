"""
src/utils/metrics.py
图像质量指标：PSNR、SSIM
"""

import logging
import math

import numpy as np
from skimage.metrics import mean_squared_error, structural_similarity

from src.common.exceptions import DimensionError

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1/MSE)，MAX=1；完全相同时返回 +inf"""
    if a.shape != b.shape:
        raise DimensionError(f"psnr: 形状不一致 {a.shape} vs {b.shape}")
    mse = mean_squared_error(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    平均局部 SSIM：11×11 高斯窗 σ=1.5，K1=0.01，K2=0.03，动态范围 1

    Args:
        a, b: (H, W) 或 (C, H, W)；多通道时逐通道计算后取平均

    Raises:
        DimensionError: 形状不一致或图像小于窗口
    """
    if a.shape != b.shape:
        raise DimensionError(f"ssim: 形状不一致 {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionError(f"ssim: 需要 (H, W) 或 (C, H, W)，实际 {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"ssim: 图像 {a.shape[-2:]} 小于 {SSIM_WINDOW}×{SSIM_WINDOW} 窗口")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, channel_axis=0 if a.ndim == 3 else None))


def batch_psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, C, H, W) 逐图 PSNR"""
    return np.array([psnr(x, y) for x, y in zip(a, b)])


def ssim_defined(shape) -> bool:
    return min(shape[-2:]) >= SSIM_WINDOW


def batch_ssim(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, C, H, W) 逐图 SSIM；图像小于窗口时无定义，整批记为 NaN"""
    if a.shape != b.shape:
        raise DimensionError(f"ssim: 形状不一致 {a.shape} vs {b.shape}")
    if not ssim_defined(a.shape):
        logger.debug(f"图像 {a.shape[-2:]} 小于 {SSIM_WINDOW}×{SSIM_WINDOW} 窗口，SSIM 记为 NaN")
        return np.full(len(a), np.nan)
    return np.array([ssim(x, y) for x, y in zip(a, b)])


def finite_mean(values: np.ndarray) -> float:
    """忽略 +inf (完全相同的图) 的平均值；全为 inf 时返回 inf"""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return math.inf
    return float(finite.mean())
