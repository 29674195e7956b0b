"""
src/utils/synth_shapes.py
合成形状数据集：抗锯齿的圆、矩形、三角形与笔画，带类别标签，测试无需下载数据
"""

import logging
from typing import Callable, List

import cv2
import numpy as np

from src.common.exceptions import ContractError
from src.models.dataset import Dataset

logger = logging.getLogger(__name__)

CLASS_NAMES = ("circle", "rectangle", "triangle", "stroke")
_SHIFT = 4
_ONE = 1 << _SHIFT


class ShapeRenderer:
    """
    [核心算法层] 在 uint8 画布上绘制单个形状
    坐标使用 cv2 的定点小数 (shift=4) 实现亚像素位置
    """

    @staticmethod
    def _fixed(points: np.ndarray) -> np.ndarray:
        return np.round(points * _ONE).astype(np.int32)

    @staticmethod
    def circle(canvas: np.ndarray, rng: np.random.Generator) -> None:
        height, width = canvas.shape
        radius = rng.uniform(0.15, 0.35) * min(height, width)
        center = rng.uniform([radius, radius], [width - radius, height - radius])
        cv2.circle(canvas, tuple(int(v) for v in ShapeRenderer._fixed(center)),
                   int(radius * _ONE), 255, -1, cv2.LINE_AA, _SHIFT)

    @staticmethod
    def rectangle(canvas: np.ndarray, rng: np.random.Generator) -> None:
        height, width = canvas.shape
        w = rng.uniform(0.3, 0.7) * width
        h = rng.uniform(0.3, 0.7) * height
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        corners = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])
        cv2.fillPoly(canvas, [ShapeRenderer._fixed(corners)], 255, cv2.LINE_AA, _SHIFT)

    @staticmethod
    def triangle(canvas: np.ndarray, rng: np.random.Generator) -> None:
        height, width = canvas.shape
        center = np.array([width, height]) / 2.0 + rng.uniform(-0.1, 0.1, 2) * [width, height]
        radius = rng.uniform(0.25, 0.42) * min(height, width)
        angle = rng.uniform(0, 2 * np.pi)
        angles = angle + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        points = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        cv2.fillPoly(canvas, [ShapeRenderer._fixed(points)], 255, cv2.LINE_AA, _SHIFT)

    @staticmethod
    def stroke(canvas: np.ndarray, rng: np.random.Generator) -> None:
        """类似手写数字的折线笔画"""
        height, width = canvas.shape
        count = int(rng.integers(3, 6))
        points = rng.uniform(0.15, 0.85, (count, 2)) * [width, height]
        thickness = max(1, int(round(min(height, width) / 12)))
        cv2.polylines(canvas, [ShapeRenderer._fixed(points)], False, 255, thickness,
                      cv2.LINE_AA, _SHIFT)


_RENDERERS: List[Callable] = [ShapeRenderer.circle, ShapeRenderer.rectangle,
                              ShapeRenderer.triangle, ShapeRenderer.stroke]


def synth_shapes(n: int, height: int, width: int, seed: int, channels: int = 1,
                 num_classes: int = len(CLASS_NAMES)) -> Dataset:
    """
    生成确定性的合成形状数据集

    Args:
        n: 样本数 (≥ 1)
        channels: 1 为灰度；3 时每张图随机着色
        num_classes: 使用前 num_classes 种形状 (2..4)

    Returns:
        Dataset，标签在各类间均衡 (相差不超过 1)
    """
    if n < 1:
        raise ContractError(f"样本数必须 ≥ 1，实际 {n}")
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise ContractError(f"类别数必须在 [2, {len(CLASS_NAMES)}] 内，实际 {num_classes}")
    if channels not in (1, 3):
        raise ContractError(f"通道数必须为 1 或 3，实际 {channels}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = np.zeros((n, channels, height, width), dtype=np.float32)
    for i, label in enumerate(labels):
        canvas = np.zeros((height, width), dtype=np.uint8)
        _RENDERERS[label](canvas, rng)
        plane = canvas.astype(np.float32) / 255.0
        if channels == 1:
            images[i, 0] = plane
        else:
            color = rng.uniform(0.3, 1.0, 3).astype(np.float32)
            images[i] = color[:, None, None] * plane[None]
    logger.debug(f"生成合成形状数据集: n={n}, {height}x{width}, 通道={channels}")
    return Dataset(images, labels, "train")
