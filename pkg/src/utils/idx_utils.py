"""
src/utils/idx_utils.py
IDX 格式 (大端) 解码，支持 .gz 透明解压
"""

import gzip
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from src.common.exceptions import DataFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_HEADER = ">I"


def read_bytes(path: Union[str, Path]) -> bytes:
    """读取文件；.gz 后缀或 gzip 头部时自动解压"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"无法读取文件: {e}", path=str(path))
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DataFormatError(f"gzip 解压失败: {e}", offset=0, path=str(path))
    return raw


def _parse(payload: bytes, magic: int, ndim: int, source: str) -> np.ndarray:
    if len(payload) < 4:
        raise DataFormatError("文件过短，缺少 magic", offset=0, path=source)
    (found,) = struct.unpack_from(_HEADER, payload, 0)
    if found != magic:
        raise DataFormatError(f"magic 不符: 期望 0x{magic:08X}，实际 0x{found:08X}", offset=0, path=source)
    header_len = 4 + 4 * ndim
    if len(payload) < header_len:
        raise DataFormatError(f"头部被截断: 需要 {header_len} 字节，实际 {len(payload)}",
                              offset=len(payload), path=source)
    dims = struct.unpack_from(f">{ndim}I", payload, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    available = len(payload) - header_len
    if available < expected:
        raise DataFormatError(f"负载被截断: 头部声明 {dims} 需 {expected} 字节，实际 {available}",
                              offset=header_len + available, path=source)
    if available > expected:
        logger.warning(f"{source}: 负载尾部多余 {available - expected} 字节，已忽略")
    return np.frombuffer(payload, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)


def parse_idx_images(payload: bytes, source: str = None) -> np.ndarray:
    """(n, rows, cols) uint8"""
    return _parse(payload, IMAGES_MAGIC, 3, source)


def parse_idx_labels(payload: bytes, source: str = None) -> np.ndarray:
    """(n,) uint8"""
    return _parse(payload, LABELS_MAGIC, 1, source)


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    return parse_idx_images(read_bytes(path), str(path))


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    return parse_idx_labels(read_bytes(path), str(path))


def encode_idx_images(images: np.ndarray) -> bytes:
    """(n, rows, cols) uint8 -> IDX 字节"""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    return struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def idx_dims(path: Union[str, Path]) -> Tuple[int, ...]:
    """只读取头部维度"""
    payload = read_bytes(path)
    (magic,) = struct.unpack_from(_HEADER, payload, 0)
    ndim = magic & 0xFF
    return struct.unpack_from(f">{ndim}I", payload, 4)
