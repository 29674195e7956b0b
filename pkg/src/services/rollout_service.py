"""
src/services/rollout_service.py
细胞网格展开：普通 / 梯度检查点 / 融合-分裂 (fusion-mitosis)

所有模式都先为 T 步预先抽取逐细胞更新掩码，保证检查点模式与普通模式前向逐位一致。
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from src.common.constants import RolloutMode
from src.common.exceptions import ContractError, DimensionError
from src.core import ops
from src.core.tensor import Tensor
from src.models.cell_grid import CellGrid, inject_input, positional_slab
from src.models.update_rule import UpdateRule, UpdateRuleParams

logger = logging.getLogger(__name__)


def draw_update_masks(rng: np.random.Generator, sigma: float, steps: int,
                      batch: int, num_cells: int) -> np.ndarray:
    """(T, B, N) 的 Bernoulli(σ) 掩码"""
    if not 0.0 <= sigma <= 1.0:
        raise ContractError(f"σ 必须在 [0,1] 内，实际 {sigma}")
    return rng.random((steps, batch, num_cells)) < sigma


def default_segments(steps: int) -> int:
    """⌊T/2⌋，至少 1"""
    return max(1, steps // 2)


def _run_steps(rule: UpdateRule, grid: CellGrid, masks: np.ndarray) -> CellGrid:
    for mask in masks:
        grid = rule.step(grid, mask)
    return grid


def rollout(grid: CellGrid, params: UpdateRuleParams, steps: int, sigma: float,
            mode: str = RolloutMode.PLAIN.value, segments: int = 0,
            rng: Optional[np.random.Generator] = None, masks: Optional[np.ndarray] = None,
            rule: Optional[UpdateRule] = None) -> CellGrid:
    """
    执行 T 次 apply_update_rule

    checkpointed 模式把 T 步分成 segments 段 (0 表示 ⌊T/2⌋)，前 segments−1 段只保留段边界，
    反向时重算；最后一段正常记录。前向结果与 plain 模式逐位一致。

    Raises:
        ContractError: T < 1、segments > T、未知模式，或未给出 rng/masks
    """
    if steps < 1:
        raise ContractError(f"T 必须 ≥ 1，实际 {steps}")
    if mode not in (RolloutMode.PLAIN.value, RolloutMode.CHECKPOINTED.value):
        raise ContractError(f"rollout 只支持 plain/checkpointed，实际 {mode}")
    segments = segments or default_segments(steps)
    if segments > steps:
        raise ContractError(f"检查点段数 {segments} 超过 T={steps}")
    if masks is None:
        if rng is None:
            raise ContractError("rollout 需要 rng 或预先抽取的 masks")
        masks = draw_update_masks(rng, sigma, steps, grid.batch, grid.num_cells)
    if masks.shape != (steps, grid.batch, grid.num_cells):
        raise DimensionError(f"更新掩码形状 {masks.shape} 应为 {(steps, grid.batch, grid.num_cells)}")
    rule = rule if rule is not None else UpdateRule(params)

    if mode == RolloutMode.PLAIN.value:
        return _run_steps(rule, grid, masks)

    size = steps // segments
    for k in range(segments - 1):
        chunk = masks[k * size:(k + 1) * size]

        def segment(cells: Tensor, chunk=chunk, template=grid) -> Tensor:
            return _run_steps(rule, template.with_cells(cells), chunk).cells

        grid = grid.with_cells(ops.checkpoint(segment, grid.cells))
    return _run_steps(rule, grid, masks[(segments - 1) * size:])


def fuse(grid: CellGrid) -> CellGrid:
    """2×2 步长 2 平均池化 (所有通道)"""
    if grid.grid_h % 2 or grid.grid_w % 2:
        raise DimensionError(f"融合需要偶数的细胞网格高宽，实际 {grid.grid_h}x{grid.grid_w}")
    batch, length = grid.batch, grid.layout.cell_len
    half_h, half_w = grid.grid_h // 2, grid.grid_w // 2
    blocks = ops.reshape(grid.cells, (batch, half_h, 2, half_w, 2, length))
    pooled = ops.mean(blocks, axis=(2, 4))
    return CellGrid(ops.reshape(pooled, (batch, half_h * half_w, length)), grid.layout, half_h, half_w)


def mitosis(grid: CellGrid) -> CellGrid:
    """每个细胞复制到其右、右下、下方，得到 2×2 块"""
    batch, length = grid.batch, grid.layout.cell_len
    cells = ops.reshape(grid.cells, (batch, grid.grid_h, grid.grid_w, length))
    cells = ops.repeat(ops.repeat(cells, 2, axis=1), 2, axis=2)
    full_h, full_w = grid.grid_h * 2, grid.grid_w * 2
    return CellGrid(ops.reshape(cells, (batch, full_h * full_w, length)), grid.layout, full_h, full_w)


def restore_positional(grid: CellGrid) -> CellGrid:
    """用当前分辨率重新计算的位置段替换位置段"""
    layout = grid.layout
    if not layout.pe_len:
        return grid
    pe = positional_slab(layout, grid.grid_h, grid.grid_w, grid.cells.dtype)
    pe = Tensor(np.broadcast_to(pe, (grid.batch,) + pe.shape).copy())
    pieces = [grid.slab("input"), grid.slab("output"), pe, grid.slab("hidden")]
    return grid.with_cells(ops.concat(pieces, axis=-1))


def fusion_mitosis_rollout(grid: CellGrid, masked_input: np.ndarray, params: UpdateRuleParams,
                           steps: int, sigma: float, rng: np.random.Generator,
                           pre: int = 2, post: int = 2, rule: Optional[UpdateRule] = None,
                           shape_trace: Optional[List[Tuple[int, int]]] = None) -> CellGrid:
    """
    pre 次全分辨率更新 → 暂存带噪输入 → 融合 → T−pre−post 次半分辨率更新 →
    分裂 → 恢复位置段并重新注入暂存输入 → post 次全分辨率更新

    Raises:
        DimensionError: 细胞网格高宽为奇数
        ContractError: T < pre + post + 1
    """
    if grid.grid_h % 2 or grid.grid_w % 2:
        raise DimensionError(f"fusion-mitosis 需要偶数的细胞网格高宽，实际 {grid.grid_h}x{grid.grid_w}")
    if steps < pre + post + 1:
        raise ContractError(f"fusion-mitosis 需要 T ≥ {pre + post + 1}，实际 {steps}")
    rule = rule if rule is not None else UpdateRule(params)

    def trace(g: CellGrid) -> None:
        if shape_trace is not None:
            shape_trace.append((g.grid_h, g.grid_w))

    trace(grid)
    grid = _run_steps(rule, grid, draw_update_masks(rng, sigma, pre, grid.batch, grid.num_cells))
    stash = np.array(masked_input, copy=True)

    grid = fuse(grid)
    trace(grid)
    middle = steps - pre - post
    grid = _run_steps(rule, grid, draw_update_masks(rng, sigma, middle, grid.batch, grid.num_cells))

    grid = mitosis(grid)
    trace(grid)
    grid = inject_input(restore_positional(grid), stash)
    return _run_steps(rule, grid, draw_update_masks(rng, sigma, post, grid.batch, grid.num_cells))
