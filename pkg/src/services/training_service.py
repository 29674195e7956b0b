"""
src/services/training_service.py
池采样训练：样本池、损失、单次迭代与训练循环

每次迭代的随机数消耗顺序固定为：
批窗口 → 课程掩码 → 随机播种 → T → 更新掩码 → 池置乱，
因此同一主种子下训练逐位可复现，断点续训也能逐位接上。
"""

import math
import time
from typing import Any, Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config.config_system import RunConfig, TrainConfig
from src.common.constants import (
    HIDDEN_RANGE, LogCategory, OUTPUT_RANGE, RolloutMode,
)
from src.common.exceptions import ContractError, DimensionError, DivergenceError
from src.core import ops
from src.core.event_bus import EventBus, EventType, get_event_bus
from src.core.tensor import Tensor, backward, memory_tracker
from src.models.cell_grid import CellGrid, CellLayout, extract_input, inject_input, patchify, seed_cells
from src.models.dataset import Dataset
from src.models.update_rule import UpdateRule, UpdateRuleParams
from src.services.logging_service import get_logging_service
from src.services.optim_service import Optimizer, cosine_lr, normalize_gradients
from src.services.rollout_service import fusion_mitosis_rollout, rollout
from src.utils.masking import CurriculumSchedule, default_noise_kind, mask_batch


class SamplePool:
    """
    (细胞网格快照, 真值图像) 对的样本池

    条目只保存数值，不携带梯度带。
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError(f"样本池容量必须 ≥ 1，实际 {capacity}")
        self.capacity = capacity
        self.cells: Optional[np.ndarray] = None
        self.truths: Optional[np.ndarray] = None

    def __len__(self):
        return 0 if self.cells is None else self.cells.shape[0]

    def add_batch(self, cells: np.ndarray, truths: np.ndarray) -> None:
        """追加 (B, N, L) 细胞与 (B, C, H, W) 真值"""
        if cells.shape[0] != truths.shape[0]:
            raise DimensionError(f"细胞批 {cells.shape[0]} 与真值批 {truths.shape[0]} 不一致")
        cells = np.array(cells, copy=True)
        truths = np.array(truths, copy=True)
        if self.cells is None:
            self.cells, self.truths = cells, truths
            return
        if cells.shape[1:] != self.cells.shape[1:] or truths.shape[1:] != self.truths.shape[1:]:
            raise DimensionError(
                f"池条目形状 {self.cells.shape[1:]}/{self.truths.shape[1:]} "
                f"与新条目 {cells.shape[1:]}/{truths.shape[1:]} 不一致")
        self.cells = np.concatenate([self.cells, cells])
        self.truths = np.concatenate([self.truths, truths])

    def take(self, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """取前 count 个条目的副本；条目仍保留在池中"""
        if count > len(self):
            raise ContractError(f"池中只有 {len(self)} 个条目，无法取出 {count} 个")
        return self.cells[:count].copy(), self.truths[:count].copy()

    def maintain(self, rng: np.random.Generator) -> None:
        """置乱后保留前 N_P 个"""
        if not len(self):
            return
        order = rng.permutation(len(self))[:self.capacity]
        self.cells = self.cells[order]
        self.truths = self.truths[order]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"capacity": np.array(self.capacity)}
        if len(self):
            arrays["cells"] = self.cells
            arrays["truths"] = self.truths
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> "SamplePool":
        pool = cls(int(arrays["capacity"]))
        if "cells" in arrays:
            pool.cells = np.array(arrays["cells"])
            pool.truths = np.array(arrays["truths"])
        return pool


def compute_loss(grid: CellGrid, truth: np.ndarray, alpha: float = 1.0,
                 beta: float = 1.0) -> Tuple[Tensor, Dict[str, float]]:
    """
    L = (α·L_rec + β·(L_o_overflow + L_h_overflow)) / (bHW)

    L_rec 与 L_o_overflow 除以 C_o，L_h_overflow 除以 C_h；批内求和。

    Returns:
        (标量损失, 已乘 1/(bHW) 的各分项)
    """
    layout = grid.layout
    expected = (grid.batch, layout.out_channels, grid.height, grid.width)
    if truth.shape != expected:
        raise DimensionError(f"真值形状 {truth.shape} 应为 {expected}")
    norm = 1.0 / (grid.batch * grid.height * grid.width)

    z_o = grid.slab("output")
    target = Tensor(patchify(np.asarray(truth), layout.patch_h, layout.patch_w).astype(grid.cells.dtype))
    rec = ops.scale(ops.l1(z_o, target), norm / layout.out_channels)
    over_o = ops.scale(ops.l1(z_o, ops.clamp(z_o, *OUTPUT_RANGE)), norm / layout.out_channels)
    terms = [ops.scale(rec, alpha), ops.scale(over_o, beta)]
    parts = {"L_rec": rec.item(), "L_o_overflow": over_o.item(), "L_h_overflow": 0.0}
    if layout.hidden_channels:
        z_h = grid.slab("hidden")
        over_h = ops.scale(ops.l1(z_h, ops.clamp(z_h, *HIDDEN_RANGE)), norm / layout.hidden_channels)
        terms.append(ops.scale(over_h, beta))
        parts["L_h_overflow"] = over_h.item()

    loss = terms[0]
    for term in terms[1:]:
        loss = ops.add(loss, term)
    return loss, parts


def draw_batch_window(dataset: Dataset, batch: int, rng: np.random.Generator) -> np.ndarray:
    """取连续的 batch 张图：起点 j ~ U{0, n−b}"""
    if len(dataset) < batch:
        raise ContractError(f"数据集只有 {len(dataset)} 张图，不足 batch={batch}")
    start = int(rng.integers(0, len(dataset) - batch + 1))
    return dataset.images[start:start + batch]


def train_iteration(i: int, params: UpdateRuleParams, pool: SamplePool, dataset: Dataset,
                    cfg: RunConfig, rng: np.random.Generator, optimizer: Optimizer,
                    schedule: Optional[CurriculumSchedule] = None,
                    rule: Optional[UpdateRule] = None) -> Dict[str, Any]:
    """
    单次池采样迭代 (i 从 1 计)

    |P| > b 且 i 为偶数时，批取池中前 b 个条目；否则播种新网格并注入课程掩码后的输入。
    展开 T ~ U{T_min, T_max} 步，计算损失、归一化梯度、更新参数，
    最后把更新后的网格与真值加入池中并维护容量。

    Raises:
        DivergenceError: 损失非有限
    """
    train: TrainConfig = cfg.train
    layout = CellLayout.from_config(cfg.model)
    dtype = params.dtype
    if schedule is None:
        schedule = CurriculumSchedule(default_noise_kind(cfg.model.in_channels, train.noise_kind))
    rule = rule if rule is not None else UpdateRule(params)

    images = draw_batch_window(dataset, train.batch_size, rng).astype(dtype, copy=False)
    from_pool = len(pool) > train.batch_size and i % 2 == 0
    if from_pool:
        cells, truth = pool.take(train.batch_size)
        grid_h, grid_w = layout.grid_shape(*truth.shape[2:])
        grid = CellGrid(Tensor(cells), layout, grid_h, grid_w)
    else:
        masked, _, _ = mask_batch(images, schedule.available_configs(i), rng)
        grid = seed_cells(train.batch_size, images.shape[2], images.shape[3], layout, dtype,
                          cfg.model.cell_init, rng)
        grid = inject_input(grid, masked)
        truth = images

    steps = int(rng.integers(train.t_min, train.t_max + 1))
    lr = cosine_lr(i - 1, train.iterations, train.lr)

    memory_tracker.reset_peak()
    started = time.perf_counter()
    if train.rollout_mode == RolloutMode.FUSION_MITOSIS.value:
        final = fusion_mitosis_rollout(grid, extract_input(grid), params, steps, train.sigma, rng,
                                       pre=train.fusion_pre, post=train.fusion_post, rule=rule)
    else:
        final = rollout(grid, params, steps, train.sigma, mode=train.rollout_mode,
                        segments=train.checkpoint_segments, rng=rng, rule=rule)
    loss, parts = compute_loss(final, truth, train.alpha, train.beta)
    forward_done = time.perf_counter()
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise DivergenceError(f"第 {i} 次迭代损失非有限: {loss_value}")

    params.zero_grad()
    backward(loss)
    backward_done = time.perf_counter()
    peak = memory_tracker.peak_bytes

    optimizer.step(params, normalize_gradients(params.grads()), lr)
    params.zero_grad()

    pool.add_batch(final.cells.data, truth)
    pool.maintain(rng)

    metrics = {
        "iteration": i,
        "lr": lr,
        "T": steps,
        "loss": loss_value,
        "L_rec": parts["L_rec"],
        "L_o_overflow": parts["L_o_overflow"],
        "L_h_overflow": parts["L_h_overflow"],
        "pool_size": len(pool),
        "wall_ms_forward": (forward_done - started) * 1e3,
        "wall_ms_backward": (backward_done - forward_done) * 1e3,
        "peak_bytes": peak,
    }
    metrics["from_pool"] = from_pool
    return metrics


class TrainingService:
    """
    训练循环：持有参数、优化器、样本池与主随机数生成器

    每次迭代后发布 ITERATION_COMPLETED；到达检查点间隔或最后一次迭代时发布 CHECKPOINT_DUE。
    """

    def __init__(self, config: RunConfig, dataset: Dataset, event_bus: Optional[EventBus] = None,
                 show_progress: bool = False):
        self.config = config
        self.dataset = dataset
        self.event_bus = event_bus or get_event_bus()
        self.show_progress = show_progress
        self.logging_service = get_logging_service()

        model = config.model
        self.layout = CellLayout.from_config(model)
        self.grid_h, self.grid_w = self.layout.grid_shape(*dataset.image_shape)
        if dataset.channels != model.in_channels:
            raise DimensionError(f"数据集通道数 {dataset.channels} 与 in_channels={model.in_channels} 不一致")

        self.rng = np.random.default_rng(config.seed)
        self.params = UpdateRuleParams.initialize(
            model, self.grid_h, self.grid_w, self.rng, np.dtype(config.engine.dtype))
        self.optimizer = Optimizer.from_config(self.params, config.train)
        self.pool = SamplePool(config.train.pool_size)
        self.schedule = CurriculumSchedule(default_noise_kind(model.in_channels, config.train.noise_kind))
        self.rule = UpdateRule(self.params)
        self.iteration = 0

    def restore(self, params: UpdateRuleParams, optimizer_state, pool: SamplePool,
                rng_state: Dict[str, Any], iteration: int) -> None:
        """从检查点恢复全部训练状态"""
        self.params = params
        self.optimizer.state = optimizer_state
        self.pool = pool
        self.rng.bit_generator.state = rng_state
        self.rule = UpdateRule(self.params)
        self.iteration = iteration
        self.logging_service.info(f"从第 {iteration} 次迭代恢复训练", LogCategory.TRAIN)

    def step(self) -> Dict[str, Any]:
        i = self.iteration + 1
        metrics = train_iteration(i, self.params, self.pool, self.dataset, self.config, self.rng,
                                  self.optimizer, self.schedule, self.rule)
        self.iteration = i
        self.event_bus.publish(EventType.ITERATION_COMPLETED, metrics)

        train = self.config.train
        if train.log_every and i % train.log_every == 0:
            self.logging_service.info(
                f"iter {i}: loss={metrics['loss']:.6f} L_rec={metrics['L_rec']:.6f} "
                f"T={metrics['T']} lr={metrics['lr']:.3e} pool={metrics['pool_size']}",
                LogCategory.TRAIN)
        if (train.checkpoint_every and i % train.checkpoint_every == 0) or i == train.iterations:
            self.event_bus.publish(EventType.CHECKPOINT_DUE, self)
        return metrics

    def run(self, until: Optional[int] = None) -> int:
        """训练到第 until (默认 I) 次迭代，返回最后完成的迭代号"""
        until = self.config.train.iterations if until is None else min(until, self.config.train.iterations)
        self.event_bus.publish(EventType.TRAIN_STARTED, {"start": self.iteration + 1, "until": until,
                                                         "params": self.params.count()})
        self.logging_service.info(
            f"训练开始: 迭代 {self.iteration + 1}..{until}，参数量 {self.params.count()}，"
            f"展开模式 {self.config.train.rollout_mode}", LogCategory.TRAIN)
        remaining = range(self.iteration + 1, until + 1)
        for _ in tqdm(remaining, desc="train", disable=not self.show_progress, leave=False):
            try:
                self.step()
            except DivergenceError as e:
                self.logging_service.error(str(e), LogCategory.TRAIN)
                raise
        self.event_bus.publish(EventType.TRAIN_FINISHED, {"iteration": self.iteration})
        self.logging_service.info(f"训练结束于第 {self.iteration} 次迭代", LogCategory.TRAIN)
        return self.iteration
