"""
src/models/serialization.py
参数容器：版本化二进制 (名称、dtype、形状、行主序小端负载) + JSON 超参数旁注

二进制布局:
    magic "VITCAPRM" | u32 版本 | u32 张量数
    每个张量: u16 名称长度 | 名称 (utf-8) | u8 dtype 码 | u8 维数 | u32×维数 | 负载
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from config.config_system import ModelConfig
from src.common.exceptions import DataFormatError
from src.core.tensor import Tensor
from src.models.update_rule import UpdateRuleParams

logger = logging.getLogger(__name__)

MAGIC = b"VITCAPRM"
FORMAT_VERSION = 1
PARAMS_FILE = "params.bin"
SIDECAR_FILE = "params.json"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def params_to_bytes(params: UpdateRuleParams) -> bytes:
    """确定性的字节序列 (同参数同字节)"""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, tensor in params.items():
        data = np.ascontiguousarray(tensor.data, dtype=tensor.dtype.newbyteorder("<"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes(order="C"))
    return b"".join(chunks)


def bytes_to_tensors(payload: bytes, source: str = None) -> "OrderedDict[str, np.ndarray]":
    """
    解析参数容器

    Raises:
        DataFormatError: magic/版本不符或负载截断 (带字节偏移)
    """
    def take(offset: int, size: int) -> bytes:
        if offset + size > len(payload):
            raise DataFormatError(f"参数容器被截断: 需要 {size} 字节，剩余 {len(payload) - offset}",
                                  offset=offset, path=source)
        return payload[offset:offset + size]

    if take(0, len(MAGIC)) != MAGIC:
        raise DataFormatError("参数容器 magic 不符", offset=0, path=source)
    offset = len(MAGIC)
    version, count = struct.unpack("<II", take(offset, 8))
    if version != FORMAT_VERSION:
        raise DataFormatError(f"不支持的参数容器版本 {version}", offset=offset, path=source)
    offset += 8

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2))
        offset += 2
        name = take(offset, name_len).decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack("<BB", take(offset, 2))
        if code not in _CODE_DTYPES:
            raise DataFormatError(f"未知 dtype 码 {code} ({name})", offset=offset, path=source)
        offset += 2
        shape = struct.unpack(f"<{ndim}I", take(offset, 4 * ndim))
        offset += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(offset, nbytes), dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataFormatError(f"参数容器尾部多余 {len(payload) - offset} 字节", offset=offset, path=source)
    return tensors


def sidecar(params: UpdateRuleParams) -> Dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "grid_h": params.grid_h,
        "grid_w": params.grid_w,
        "dtype": str(params.dtype),
        "parameter_count": params.count(),
    }


def save_params(params: UpdateRuleParams, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """写出 params.bin 与 params.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = directory / PARAMS_FILE, directory / SIDECAR_FILE
    bin_path.write_bytes(params_to_bytes(params))
    json_path.write_text(json.dumps(sidecar(params), indent=2, sort_keys=True), encoding="utf-8")
    logger.debug(f"参数已保存: {bin_path}")
    return bin_path, json_path


def load_params(directory: Union[str, Path]) -> UpdateRuleParams:
    """读取参数目录，校验张量名称与形状与旁注中的模型配置一致"""
    directory = Path(directory)
    bin_path, json_path = directory / PARAMS_FILE, directory / SIDECAR_FILE
    try:
        meta = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"无法读取参数旁注: {e}", path=str(json_path))
    try:
        payload = bin_path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"无法读取参数容器: {e}", path=str(bin_path))

    arrays = bytes_to_tensors(payload, source=str(bin_path))
    model_config = ModelConfig.from_dict(meta["model"])
    reference = UpdateRuleParams.initialize(model_config, meta["grid_h"], meta["grid_w"],
                                            np.random.default_rng(0), dtype=np.dtype(meta["dtype"]))
    expected = {name: t.shape for name, t in reference.items()}
    actual = {name: a.shape for name, a in arrays.items()}
    if expected != actual:
        raise DataFormatError(f"参数张量与模型配置不一致: 期望 {expected}，实际 {actual}",
                              path=str(bin_path))
    tensors = OrderedDict((name, Tensor(a, requires_grad=True, name=name)) for name, a in arrays.items())
    return UpdateRuleParams(model_config, meta["grid_h"], meta["grid_w"], tensors)
