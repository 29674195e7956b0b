"""
src/models/cell_grid.py
细胞网格：通道布局、位置编码、播种、注入与读出

每个细胞向量按 [输入 C_i·P | 输出 C_o·P | 位置 C_pe·P | 隐藏 C_h] 排列，P = P_H·P_W。
细胞按网格行主序展平为 N = (H/P_H)·(W/P_W) 个。
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from src.common.constants import SEED_HIDDEN_VALUE, SEED_OUTPUT_VALUE
from src.common.exceptions import ContractError, DimensionError
from src.core import ops
from src.core.tensor import Tensor

logger = logging.getLogger(__name__)

# 拼接型位置编码每像素贡献的通道数；相加型为 0
PE_CHANNELS = {
    "handcrafted": 0,
    "learned": 0,
    "none": 0,
    "xy": 2,
    "sincos5": 20,
    "sincos5xy": 22,
}
ADDED_POSITIONAL = ("handcrafted", "learned")
FOURIER_OCTAVES = 5


def patchify(images: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C·P_H·P_W)，patch 内按 (C, P_H, P_W) 展平"""
    batch, channels, height, width = images.shape
    if height % patch_h or width % patch_w:
        raise DimensionError(f"图像尺寸 {height}x{width} 无法被 patch {patch_h}x{patch_w} 整除")
    grid_h, grid_w = height // patch_h, width // patch_w
    blocks = images.reshape(batch, channels, grid_h, patch_h, grid_w, patch_w)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(batch, grid_h * grid_w, channels * patch_h * patch_w)


def unpatchify(cells: np.ndarray, channels: int, grid_h: int, grid_w: int,
               patch_h: int, patch_w: int) -> np.ndarray:
    """patchify 的逆变换"""
    batch = cells.shape[0]
    blocks = cells.reshape(batch, grid_h, grid_w, channels, patch_h, patch_w)
    blocks = blocks.transpose(0, 3, 1, 4, 2, 5)
    return blocks.reshape(batch, channels, grid_h * patch_h, grid_w * patch_w)


def positional_channels(kind: str, height: int, width: int) -> np.ndarray:
    """
    拼接型 2-D 位置通道 (C_pe, H, W)，像素坐标归一化到 [-1, 1]

    xy: (x, y)；sincos5: 每个倍频 j 依次 sin/cos(2^j·π·x)、sin/cos(2^j·π·y)；sincos5xy: sincos5 后接 xy
    """
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.full(1, -1.0)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.full(1, -1.0)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if kind not in PE_CHANNELS:
        raise ContractError(f"未知位置编码 {kind}")

    planes = []
    if kind in ("sincos5", "sincos5xy"):
        for j in range(FOURIER_OCTAVES):
            freq = (2.0 ** j) * np.pi
            planes.extend([np.sin(freq * xx), np.cos(freq * xx), np.sin(freq * yy), np.cos(freq * yy)])
    if kind in ("xy", "sincos5xy"):
        planes.extend([xx, yy])
    if not planes:
        return np.zeros((0, height, width))
    return np.stack(planes)


def sinusoid_table(num_tokens: int, dim: int) -> np.ndarray:
    """一维 Transformer 正弦编码 (N, d)：偶数列 sin，奇数列 cos，按展平后的细胞序号"""
    position = np.arange(num_tokens, dtype=np.float64)[:, None]
    pair = np.arange(0, dim, 2, dtype=np.float64)
    angle = position / np.power(10000.0, pair / dim)
    table = np.zeros((num_tokens, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table


@dataclass(frozen=True)
class CellLayout:
    """每个细胞向量内各通道段的位置"""
    in_channels: int
    out_channels: int
    hidden_channels: int
    patch_h: int = 1
    patch_w: int = 1
    positional: str = "none"

    def __post_init__(self):
        if self.positional not in PE_CHANNELS:
            raise ContractError(f"未知位置编码 {self.positional}")

    @classmethod
    def from_config(cls, model_config) -> "CellLayout":
        return cls(model_config.in_channels, model_config.out_channels, model_config.hidden_channels,
                   model_config.patch_h, model_config.patch_w, model_config.positional)

    @property
    def patch_area(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def pe_channels(self) -> int:
        return PE_CHANNELS[self.positional]

    @property
    def input_len(self) -> int:
        return self.in_channels * self.patch_area

    @property
    def output_len(self) -> int:
        return self.out_channels * self.patch_area

    @property
    def pe_len(self) -> int:
        return self.pe_channels * self.patch_area

    @property
    def cell_len(self) -> int:
        """L = C_P·P_H·P_W + C_h"""
        return self.input_len + self.output_len + self.pe_len + self.hidden_channels

    @property
    def update_len(self) -> int:
        """L_out = C_o·P_H·P_W + C_h"""
        return self.output_len + self.hidden_channels

    def slab_bounds(self, name: str) -> Tuple[int, int]:
        starts = {
            "input": 0,
            "output": self.input_len,
            "pe": self.input_len + self.output_len,
            "hidden": self.input_len + self.output_len + self.pe_len,
        }
        lengths = {"input": self.input_len, "output": self.output_len,
                   "pe": self.pe_len, "hidden": self.hidden_channels}
        if name not in starts:
            raise ContractError(f"未知通道段 {name}")
        return starts[name], starts[name] + lengths[name]

    def grid_shape(self, height: int, width: int) -> Tuple[int, int]:
        if height % self.patch_h or width % self.patch_w:
            raise DimensionError(
                f"H,W ({height}x{width}) 必须可被 patch ({self.patch_h}x{self.patch_w}) 整除")
        return height // self.patch_h, width // self.patch_w


@dataclass
class CellGrid:
    """B×N×L 的细胞状态"""
    cells: Tensor
    layout: CellLayout
    grid_h: int
    grid_w: int

    @property
    def batch(self) -> int:
        return self.cells.shape[0]

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def height(self) -> int:
        return self.grid_h * self.layout.patch_h

    @property
    def width(self) -> int:
        return self.grid_w * self.layout.patch_w

    def slab(self, name: str) -> Tensor:
        start, stop = self.layout.slab_bounds(name)
        return ops.slice_axis(self.cells, start, stop, axis=-1)

    def slab_data(self, name: str) -> np.ndarray:
        start, stop = self.layout.slab_bounds(name)
        return self.cells.data[..., start:stop]

    def with_cells(self, cells: Tensor) -> "CellGrid":
        return replace(self, cells=cells)

    def detach(self) -> "CellGrid":
        return replace(self, cells=Tensor(self.cells.data.copy()))

    def select(self, indices) -> "CellGrid":
        """按批下标取子网格 (脱离梯度带)"""
        return replace(self, cells=Tensor(self.cells.data[indices].copy()))

    def __repr__(self):
        return (f"CellGrid(B={self.batch}, grid={self.grid_h}x{self.grid_w}, "
                f"L={self.layout.cell_len}, positional={self.layout.positional})")


def positional_slab(layout: CellLayout, grid_h: int, grid_w: int, dtype) -> np.ndarray:
    """(N, C_pe·P) 位置段取值"""
    height, width = grid_h * layout.patch_h, grid_w * layout.patch_w
    planes = positional_channels(layout.positional, height, width)[None]
    return patchify(planes, layout.patch_h, layout.patch_w)[0].astype(dtype)


def seed_cells(batch: int, height: int, width: int, layout: CellLayout, dtype=np.float32,
               cell_init: str = "constant", rng: Optional[np.random.Generator] = None) -> CellGrid:
    """
    播种细胞网格：输出 0.5、隐藏 0、输入段置 0 等待注入、位置段按编码填充

    cell_init="random" 时输出 ~U(0,1)、隐藏 ~U(-1,1)，需要 rng

    Raises:
        DimensionError: H,W 不能被 patch 整除
    """
    if batch < 1:
        raise DimensionError(f"batch 必须 ≥ 1，实际 {batch}")
    grid_h, grid_w = layout.grid_shape(height, width)
    num = grid_h * grid_w
    cells = np.zeros((batch, num, layout.cell_len), dtype=dtype)

    out_start, out_stop = layout.slab_bounds("output")
    hid_start, hid_stop = layout.slab_bounds("hidden")
    if cell_init == "constant":
        cells[..., out_start:out_stop] = SEED_OUTPUT_VALUE
        cells[..., hid_start:hid_stop] = SEED_HIDDEN_VALUE
    elif cell_init == "random":
        if rng is None:
            raise ContractError("随机播种需要 rng")
        cells[..., out_start:out_stop] = rng.uniform(0.0, 1.0, (batch, num, out_stop - out_start))
        cells[..., hid_start:hid_stop] = rng.uniform(-1.0, 1.0, (batch, num, hid_stop - hid_start))
    else:
        raise ContractError(f"未知播种方式 {cell_init}")

    pe_start, pe_stop = layout.slab_bounds("pe")
    if pe_stop > pe_start:
        cells[..., pe_start:pe_stop] = positional_slab(layout, grid_h, grid_w, dtype)
    return CellGrid(Tensor(cells), layout, grid_h, grid_w)


def inject_input(grid: CellGrid, images) -> CellGrid:
    """
    用图像 patch 覆盖输入段，其余通道段不变

    Args:
        images: (B, C_i, H, W) 数组或 Tensor

    Raises:
        DimensionError: 形状不匹配
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    expected = (grid.batch, grid.layout.in_channels, grid.height, grid.width)
    if data.shape != expected:
        raise DimensionError(f"注入图像形状 {data.shape} 与网格期望 {expected} 不一致")
    patches = Tensor(patchify(data, grid.layout.patch_h, grid.layout.patch_w).astype(grid.cells.dtype))
    start, stop = grid.layout.slab_bounds("input")
    rest = ops.slice_axis(grid.cells, stop, grid.layout.cell_len, axis=-1)
    return grid.with_cells(ops.concat([patches, rest], axis=-1))


def extract_input(grid: CellGrid) -> np.ndarray:
    layout = grid.layout
    return unpatchify(grid.slab_data("input"), layout.in_channels, grid.grid_h, grid.grid_w,
                      layout.patch_h, layout.patch_w)


def extract_output(grid: CellGrid) -> np.ndarray:
    """读出输出段并还原为 (B, C_o, H, W) 图像"""
    layout = grid.layout
    return unpatchify(grid.slab_data("output"), layout.out_channels, grid.grid_h, grid.grid_w,
                      layout.patch_h, layout.patch_w)


def extract_hidden(grid: CellGrid) -> np.ndarray:
    """(B, N, C_h)"""
    return grid.slab_data("hidden")


def write_output(grid: CellGrid, images: np.ndarray) -> CellGrid:
    """直接写入输出段 (B, C_o, H, W)；用于测试与分析"""
    layout = grid.layout
    cells = grid.cells.data.copy()
    start, stop = layout.slab_bounds("output")
    cells[..., start:stop] = patchify(np.asarray(images), layout.patch_h, layout.patch_w)
    return grid.with_cells(Tensor(cells))
