"""
src/utils/image_utils.py
图像网格读写 (二进制 PGM/PPM，按扩展名也支持 PNG)
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import cv2
import numpy as np

from src.common.exceptions import ContractError, DataFormatError, ServiceError

logger = logging.getLogger(__name__)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[0,1] 浮点 -> uint8 (四舍五入)"""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def tile_images(images: np.ndarray, cols: int) -> np.ndarray:
    """(n, C, H, W) -> (C, rows·H, cols·W)，不足一行的位置补 0"""
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractError(f"图像网格需要非空 (n, C, H, W)，实际 {images.shape}")
    if cols < 1:
        raise ContractError(f"列数必须 ≥ 1，实际 {cols}")
    n, channels, height, width = images.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.zeros((channels, rows * height, cols * width), dtype=images.dtype)
    for k in range(n):
        r, c = divmod(k, cols)
        canvas[:, r * height:(r + 1) * height, c * width:(c + 1) * width] = images[k]
    return canvas


def write_image(image: np.ndarray, path: Union[str, Path]) -> Path:
    """写出单张 (C, H, W) 图像；C 为 1 写灰度，C 为 3 写彩色"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(image)
    if pixels.shape[0] == 1:
        encoded = pixels[0]
    elif pixels.shape[0] == 3:
        encoded = cv2.cvtColor(np.ascontiguousarray(pixels.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    else:
        raise ContractError(f"只支持 1 或 3 通道图像，实际 {pixels.shape[0]}")
    if not cv2.imwrite(str(path), encoded):
        raise ServiceError(f"写入图像失败: {path}")
    return path


def write_image_grid(images: np.ndarray, cols: int, path: Union[str, Path]) -> Path:
    """
    拼接成网格写出；扩展名 .pgm/.ppm 为无损可移植像素图

    Args:
        images: (n, C, H, W)，取值 [0,1]
        cols: 每行图像数
    """
    path = write_image(tile_images(images, cols), path)
    logger.debug(f"图像网格已写出: {path}")
    return path


def read_image(path: Union[str, Path]) -> np.ndarray:
    """读取为 (C, H, W) 浮点 [0,1]"""
    path = Path(path)
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise DataFormatError("无法解码图像", path=str(path))
    if pixels.ndim == 2:
        planes = pixels[None]
    else:
        planes = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).transpose(2, 0, 1)
    return planes.astype(np.float32) / 255.0


def write_triptych(inputs: np.ndarray, outputs: np.ndarray, truths: np.ndarray,
                   path: Union[str, Path]) -> Path:
    """每行依次为 输入 / 输出 / 真值"""
    rows: Sequence[np.ndarray] = []
    for x, y, t in zip(inputs, outputs, truths):
        rows.extend([x, y, t])
    return write_image_grid(np.stack(rows), 3, path)
