"""
src/services/benchmark_service.py
性能基准：局部注意力 vs 带状掩码全局注意力；普通展开 vs 梯度检查点展开
"""

import gc
import time
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config.config_system import RunConfig
from src.common.constants import LogCategory, RolloutMode
from src.common.exceptions import ContractError
from src.core import ops
from src.core.tensor import Tensor, backward, memory_tracker
from src.models.attention import (
    attention_scale, build_neighborhood_index, localized_attention, masked_global_attention,
)
from src.models.cell_grid import CellLayout, inject_input, seed_cells
from src.models.update_rule import UpdateRule, UpdateRuleParams
from src.services.logging_service import get_logging_service
from src.services.rollout_service import draw_update_masks, rollout

ATTENTION_TOLERANCE = 1e-5
KERNELS = {"local": localized_attention, "global": masked_global_attention}


def _timed_pass(kernel, q: Tensor, k: Tensor, v: Tensor, index: np.ndarray, scale: float):
    for t in (q, k, v):
        t.grad = None
    started = time.perf_counter()
    out = kernel(q, k, v, index, scale)
    loss = ops.sum(out)
    forward_done = time.perf_counter()
    backward(loss)
    finished = time.perf_counter()
    return out.data, (forward_done - started) * 1e3, (finished - forward_done) * 1e3


def bench_attention(grid_sizes: Sequence[int] = (16, 32, 64), window: int = 3, heads: int = 4,
                    embed_dim: int = 128, repeats: int = 3, seed: int = 0,
                    dtype=np.float32) -> pd.DataFrame:
    """
    每个网格边长先校验两种实现输出一致 (≤ 1e-5)，再记录前向+反向耗时 (取 repeats 次最小值)

    Returns:
        每个 (size, kernel) 一行：N, kernel, forward_ms, backward_ms, total_ms, max_abs_diff
    """
    rng = np.random.default_rng(seed)
    head_dim = embed_dim // heads
    scale = attention_scale(embed_dim, heads)
    rows: List[Dict] = []
    for side in grid_sizes:
        num = side * side
        index = build_neighborhood_index(side, side, window, window, "wrap")
        q, k, v = (Tensor(rng.standard_normal((1, heads, num, head_dim)).astype(dtype), requires_grad=True)
                   for _ in range(3))
        outputs = {name: kernel(q, k, v, index, scale).data for name, kernel in KERNELS.items()}
        diff = float(np.max(np.abs(outputs["local"] - outputs["global"])))
        if diff > ATTENTION_TOLERANCE:
            raise ContractError(f"N={num}: 局部注意力与全局对照相差 {diff:.3e} > {ATTENTION_TOLERANCE}")
        del outputs
        for name, kernel in KERNELS.items():
            best_forward = best_backward = float("inf")
            for _ in range(repeats):
                _, forward_ms, backward_ms = _timed_pass(kernel, q, k, v, index, scale)
                best_forward = min(best_forward, forward_ms)
                best_backward = min(best_backward, backward_ms)
            rows.append({"N": num, "kernel": name, "forward_ms": best_forward,
                         "backward_ms": best_backward, "total_ms": best_forward + best_backward,
                         "max_abs_diff": diff})
        gc.collect()
    return pd.DataFrame(rows)


def scaling_ratios(frame: pd.DataFrame) -> Dict[str, List[float]]:
    """相邻尺寸 (N → 4N) 的总耗时之比"""
    ratios: Dict[str, List[float]] = {}
    for kernel, group in frame.groupby("kernel"):
        times = group.sort_values("N")["total_ms"].to_numpy()
        ratios[kernel] = [float(b / a) for a, b in zip(times[:-1], times[1:])]
    return ratios


def _memory_pass(params: UpdateRuleParams, rule: UpdateRule, images: np.ndarray, masks: np.ndarray,
                 mode: str, segments: int, cell_init: str) -> Dict:
    for t in params:
        t.grad = None
    gc.collect()
    layout = params.layout
    grid = inject_input(seed_cells(images.shape[0], images.shape[2], images.shape[3], layout, params.dtype,
                                   cell_init, np.random.default_rng(0)), images)
    memory_tracker.reset_peak()
    baseline = memory_tracker.live_bytes
    started = time.perf_counter()
    final = rollout(grid, params, masks.shape[0], 0.5, mode=mode, segments=segments, masks=masks, rule=rule)
    loss = ops.sum(final.slab("output"))
    forward_done = time.perf_counter()
    output = final.cells.data.copy()
    backward(loss)
    finished = time.perf_counter()
    return {"mode": mode, "forward_ms": (forward_done - started) * 1e3,
            "backward_ms": (finished - forward_done) * 1e3,
            "peak_bytes": memory_tracker.peak_bytes - baseline, "output": output}


def bench_memory(config: RunConfig, steps: int = 32, segments: int = 16, batch: Optional[int] = None,
                 seed: int = 0) -> pd.DataFrame:
    """
    相同更新掩码下比较普通与检查点展开：前向/反向耗时与峰值张量字节 (相对起点)

    Raises:
        ContractError: segments > T，或两种模式前向结果不一致
    """
    if segments > steps:
        raise ContractError(f"检查点段数 {segments} 超过 T={steps}")
    rng = np.random.default_rng(seed)
    model = config.model
    layout = CellLayout.from_config(model)
    grid_h, grid_w = layout.grid_shape(config.data.height, config.data.width)
    params = UpdateRuleParams.initialize(model, grid_h, grid_w, rng, np.dtype(config.engine.dtype))
    rule = UpdateRule(params)
    batch = batch or config.train.batch_size
    images = rng.random((batch, model.in_channels, config.data.height, config.data.width)).astype(params.dtype)
    masks = draw_update_masks(rng, config.train.sigma, steps, batch, grid_h * grid_w)

    plain = _memory_pass(params, rule, images, masks, RolloutMode.PLAIN.value, segments, model.cell_init)
    checkpointed = _memory_pass(params, rule, images, masks, RolloutMode.CHECKPOINTED.value, segments,
                                model.cell_init)
    identical = bool(np.array_equal(plain.pop("output"), checkpointed.pop("output")))
    if not identical:
        raise ContractError("检查点展开的前向结果与普通展开不一致")
    frame = pd.DataFrame([plain, checkpointed])
    frame.insert(1, "T", steps)
    frame.insert(2, "segments", [0, segments])
    frame["forward_identical"] = identical
    get_logging_service().info(
        f"bench-memory: 峰值 {plain['peak_bytes']} → {checkpointed['peak_bytes']} 字节，"
        f"反向 {plain['backward_ms']:.1f} → {checkpointed['backward_ms']:.1f} ms", LogCategory.BENCH)
    return frame
