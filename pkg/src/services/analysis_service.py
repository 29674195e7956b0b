"""
src/services/analysis_service.py
去噪评估与细胞状态分析

包括：九种掩码配置的 PSNR/SSIM 评估、细胞损伤恢复、长程稳定性、更新率扫描、
注意力头屏蔽、隐藏状态 PCA、空间插值、重新注入、无掩码/全掩码探测、
未见噪声泛化与注意力权重导出。所有分析只读参数。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from config.config_system import RunConfig
from src.common.constants import (
    CONVERGENCE_TOL, CONVERGENCE_WINDOW, DIVERGENCE_BOUND, EVAL_STEPS, LogCategory, NOT_CONVERGED,
    STABILITY_STEPS,
)
from src.common.exceptions import ContractError, DimensionError, IndexRangeError
from src.core.event_bus import EventType, get_event_bus
from src.core.tensor import Tensor, no_grad
from src.models.cell_grid import CellGrid, extract_hidden, extract_output, inject_input, seed_cells
from src.models.dataset import Dataset
from src.models.update_rule import UpdateRule, UpdateRuleParams, draw_update_mask
from src.services.data_service import DataService, resample_images
from src.services.logging_service import get_logging_service
from src.services.rollout_service import draw_update_masks, rollout
from src.utils.image_utils import write_image_grid, write_triptych
from src.utils.masking import CurriculumSchedule, MaskConfig, apply_mask, default_noise_kind
from src.utils.metrics import batch_psnr, batch_ssim, finite_mean


# ==================== 推理 ====================

def seed_with_input(params: UpdateRuleParams, images: np.ndarray, cell_init: str = "constant",
                    rng: Optional[np.random.Generator] = None) -> CellGrid:
    """按图像尺寸播种并注入输入"""
    images = np.asarray(images, dtype=params.dtype)
    grid = seed_cells(images.shape[0], images.shape[2], images.shape[3], params.layout, params.dtype,
                      cell_init, rng)
    return inject_input(grid, images)


def run_steps(grid: CellGrid, params: UpdateRuleParams, steps: int, sigma: float,
              rng: np.random.Generator, rule: Optional[UpdateRule] = None) -> CellGrid:
    """不记录梯度带的展开"""
    with no_grad():
        return rollout(grid, params, steps, sigma, rng=rng, rule=rule)


def infer(params: UpdateRuleParams, images: np.ndarray, steps: int, sigma: float,
          rng: np.random.Generator, rule: Optional[UpdateRule] = None,
          cell_init: str = "constant") -> CellGrid:
    grid = seed_with_input(params, images, cell_init, rng)
    return run_steps(grid, params, steps, sigma, rng, rule)


def _batches(count: int, size: int):
    for start in range(0, count, size):
        yield slice(start, min(start + size, count))


# ==================== 去噪评估 ====================

@dataclass
class MetricReport:
    """
    汇总与逐配置的 PSNR/SSIM

    per_config 以 MaskConfig 文本形式为键，每项含模型输出、带噪输入与常数 0.5 画布三组指标
    """
    psnr_db: float
    ssim: float
    noisy_psnr_db: float
    constant_psnr_db: float
    per_config: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = [{"config": key, **values} for key, values in self.per_config.items()]
        rows.append({"config": "all", "psnr_db": self.psnr_db, "ssim": self.ssim,
                     "noisy_psnr_db": self.noisy_psnr_db,
                     "constant_psnr_db": self.constant_psnr_db})
        return rows


def evaluation_configs(channels: int, noise_kind: str = "auto") -> List[MaskConfig]:
    """固定顺序的九种掩码配置"""
    return list(CurriculumSchedule(default_noise_kind(channels, noise_kind)).configs)


def evaluate_denoising(params: UpdateRuleParams, dataset: Dataset, steps: int = EVAL_STEPS,
                       sigma: float = 0.5, configs: Optional[Sequence[MaskConfig]] = None,
                       rng: Optional[np.random.Generator] = None, batch_size: int = 32,
                       cell_init: str = "constant") -> MetricReport:
    """
    逐配置掩码 → 播种注入 → T 步 → 与真值比较

    Returns:
        MetricReport；汇总值为各配置的平均
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    configs = list(configs) if configs is not None else evaluation_configs(dataset.channels)
    images = dataset.images.astype(params.dtype)
    constant = np.full_like(images, 0.5)
    rule = UpdateRule(params)

    per_config: Dict[str, Dict[str, float]] = {}
    for cfg in configs:
        psnrs, ssims, noisy_psnrs, noisy_ssims = [], [], [], []
        for part in _batches(len(images), batch_size):
            truth = images[part]
            masked, _ = apply_mask(truth, cfg, rng)
            output = extract_output(infer(params, masked, steps, sigma, rng, rule, cell_init))
            psnrs.append(batch_psnr(output, truth))
            ssims.append(batch_ssim(output, truth))
            noisy_psnrs.append(batch_psnr(masked, truth))
            noisy_ssims.append(batch_ssim(masked, truth))
        per_config[cfg.format()] = {
            "psnr_db": finite_mean(np.concatenate(psnrs)),
            "ssim": float(np.mean(np.concatenate(ssims))),
            "noisy_psnr_db": finite_mean(np.concatenate(noisy_psnrs)),
            "noisy_ssim": float(np.mean(np.concatenate(noisy_ssims))),
            "constant_psnr_db": finite_mean(batch_psnr(constant, images)),
            "constant_ssim": float(np.mean(batch_ssim(constant, images))),
        }

    def average(key: str) -> float:
        return finite_mean(np.array([v[key] for v in per_config.values()]))

    # 小于 SSIM 窗口的图像各配置均为 NaN，汇总值保持 NaN
    ssim_all = float(np.mean([v["ssim"] for v in per_config.values()]))
    return MetricReport(average("psnr_db"), ssim_all, average("noisy_psnr_db"),
                        average("constant_psnr_db"), per_config)


# ==================== 稳定性 ====================

@dataclass
class StabilityTrace:
    """逐步输出段 L∞ 变化量"""
    drift: np.ndarray
    converged_at: int
    diverged: bool
    max_abs: float

    @property
    def status(self) -> str:
        if self.diverged:
            return "diverged"
        return "not-converged" if self.converged_at == NOT_CONVERGED else "converged"


def convergence_step(drift: np.ndarray, tol: float = CONVERGENCE_TOL,
                     window: int = CONVERGENCE_WINDOW) -> int:
    """
    输出开始稳定前已执行的步数：最小的 t 使 drift[t:t+window] 全部 < tol；找不到返回 NOT_CONVERGED
    """
    below = np.asarray(drift) < tol
    run = 0
    for t, ok in enumerate(below):
        run = run + 1 if ok else 0
        if run == window:
            return t - window + 1
    return NOT_CONVERGED


def run_with_drift(grid: CellGrid, rule: UpdateRule, steps: int, sigma: float,
                   rng: np.random.Generator,
                   bound: float = DIVERGENCE_BOUND) -> Tuple[CellGrid, np.ndarray, bool, float]:
    """
    逐步展开并记录输出段最大变化；任何细胞值非有限或超出 ±bound 视为发散，
    发散后剩余步的 drift 记为 inf

    Returns:
        (最终网格, drift, 是否发散, 细胞最大绝对值)
    """
    drift = np.full(steps, np.inf)
    diverged = False
    max_abs = float(np.max(np.abs(grid.cells.data)))
    with no_grad():
        for t in range(steps):
            before = grid.slab_data("output").copy()
            grid = rule.step(grid, draw_update_mask(rng, sigma, grid.batch, grid.num_cells))
            cells = grid.cells.data
            if not np.all(np.isfinite(cells)):
                diverged = True
                max_abs = math.inf
                break
            max_abs = max(max_abs, float(np.max(np.abs(cells))))
            drift[t] = float(np.max(np.abs(grid.slab_data("output") - before)))
            if max_abs > bound:
                diverged = True
                break
    return grid, drift, diverged, max_abs


def stability_run(params: UpdateRuleParams, grid: CellGrid, steps: int = STABILITY_STEPS,
                  sigma: float = 0.5, rng: Optional[np.random.Generator] = None,
                  tol: float = CONVERGENCE_TOL, window: int = CONVERGENCE_WINDOW,
                  bound: float = DIVERGENCE_BOUND) -> StabilityTrace:
    """长程展开，返回长度为 steps 的漂移轨迹与收敛/发散判定"""
    rng = rng if rng is not None else np.random.default_rng(0)
    _, drift, diverged, max_abs = run_with_drift(grid, UpdateRule(params), steps, sigma, rng, bound)
    converged_at = NOT_CONVERGED if diverged else convergence_step(drift, tol, window)
    return StabilityTrace(drift, converged_at, diverged, max_abs)


def update_rate_sweep(params: UpdateRuleParams, images: np.ndarray, sigmas: Sequence[float],
                      rng: Optional[np.random.Generator] = None, max_steps: int = 256,
                      tol: float = CONVERGENCE_TOL, window: int = CONVERGENCE_WINDOW,
                      cell_init: str = "constant") -> Dict[float, int]:
    """
    各 σ 下输出稳定所需的迭代数；σ=0 时输出永远停在种子状态，记为 NOT_CONVERGED
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rule = UpdateRule(params)
    result: Dict[float, int] = {}
    for sigma in sigmas:
        if sigma == 0.0:
            result[sigma] = NOT_CONVERGED
            continue
        grid = seed_with_input(params, images, cell_init, rng)
        _, drift, diverged, _ = run_with_drift(grid, rule, max_steps, sigma, rng)
        result[sigma] = NOT_CONVERGED if diverged else convergence_step(drift, tol, window)
    return result


# ==================== 损伤 ====================

def damage_mask(grid_h: int, grid_w: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """每个样本随机一块连续的 (H/2)×(W/2) 细胞区域，返回 (B, N) 布尔掩码"""
    block_h, block_w = max(1, grid_h // 2), max(1, grid_w // 2)
    tops = rng.integers(0, grid_h - block_h + 1, size=batch)
    lefts = rng.integers(0, grid_w - block_w + 1, size=batch)
    mask = np.zeros((batch, grid_h, grid_w), dtype=bool)
    for b in range(batch):
        mask[b, tops[b]:tops[b] + block_h, lefts[b]:lefts[b] + block_w] = True
    return mask.reshape(batch, grid_h * grid_w)


def damage_cells(grid: CellGrid, rng: np.random.Generator,
                 mask: Optional[np.ndarray] = None) -> CellGrid:
    """把损伤区域的输出段与隐藏段替换为 U(−1,1)；输入段与位置段不变"""
    if mask is None:
        mask = damage_mask(grid.grid_h, grid.grid_w, grid.batch, rng)
    if mask.shape != (grid.batch, grid.num_cells):
        raise DimensionError(f"损伤掩码形状 {mask.shape} 应为 {(grid.batch, grid.num_cells)}")
    cells = grid.cells.data.copy()
    noise = rng.uniform(-1.0, 1.0, cells.shape).astype(cells.dtype)
    for name in ("output", "hidden"):
        start, stop = grid.layout.slab_bounds(name)
        region = cells[..., start:stop]
        cells[..., start:stop] = np.where(mask[..., None], noise[..., start:stop], region)
    return grid.with_cells(Tensor(cells))


def damage_run(params: UpdateRuleParams, images: np.ndarray, truth: np.ndarray, steps: int,
               recovery_steps: int, sigma: float, rng: np.random.Generator,
               cell_init: str = "constant") -> Dict[str, float]:
    """收敛 → 损伤 → 继续更新；与不损伤的继续更新比较 PSNR"""
    rule = UpdateRule(params)
    converged = infer(params, images, steps, sigma, rng, rule, cell_init)
    damaged = damage_cells(converged, rng)
    recovered = run_steps(damaged, params, recovery_steps, sigma, rng, rule)
    undamaged = run_steps(converged, params, recovery_steps, sigma, rng, rule)
    return {
        "psnr_converged": finite_mean(batch_psnr(extract_output(converged), truth)),
        "psnr_damaged": finite_mean(batch_psnr(np.clip(extract_output(damaged), 0, 1), truth)),
        "psnr_recovered": finite_mean(batch_psnr(extract_output(recovered), truth)),
        "psnr_undamaged": finite_mean(batch_psnr(extract_output(undamaged), truth)),
    }


# ==================== 注意力头屏蔽 ====================

def head_mask_rollout(params: UpdateRuleParams, images: np.ndarray, masked_heads: Sequence[int],
                      steps: int, sigma: float, rng: np.random.Generator,
                      cell_init: str = "constant") -> np.ndarray:
    """
    屏蔽指定头后展开，返回输出图像

    Raises:
        IndexRangeError: 头序号越界
    """
    heads = params.config.heads
    for head in masked_heads:
        if not 0 <= head < heads:
            raise IndexRangeError(f"头序号 {head} 超出范围 [0, {heads})")
    rule = UpdateRule(params, masked_heads=masked_heads)
    return extract_output(infer(params, images, steps, sigma, rng, rule, cell_init))


# ==================== 隐藏状态 PCA ====================

@dataclass
class PCAResult:
    projections: np.ndarray
    explained_variance_ratio: np.ndarray
    components: int
    degenerate: bool


def pca_hidden(hidden: np.ndarray, components: int = 3, rel_tol: float = 1e-10) -> PCAResult:
    """
    对展平后的隐藏状态做去均值 PCA (协方差或 Gram 矩阵的特征分解，取较小者)

    Args:
        hidden: (n, ...) 每个样本的隐藏状态
        components: 期望主成分数；协方差秩不足时减少并置 degenerate

    Raises:
        ContractError: 样本数 < 2
    """
    n = hidden.shape[0]
    if n < 2:
        raise ContractError(f"PCA 至少需要 2 个样本，实际 {n}")
    x = hidden.reshape(n, -1).astype(np.float64)
    centered = x - x.mean(axis=0)
    if centered.shape[1] <= n:
        evals, evecs = linalg.eigh(centered.T @ centered / (n - 1))
        evals, evecs = evals[::-1], evecs[:, ::-1]
        projections = centered @ evecs
    else:
        evals, u = linalg.eigh(centered @ centered.T / (n - 1))
        evals, u = evals[::-1], u[:, ::-1]
        projections = u * np.sqrt(np.clip(evals, 0.0, None) * (n - 1))

    evals = np.clip(evals, 0.0, None)
    total = float(evals.sum())
    rank = int(np.sum(evals > rel_tol * evals[0])) if total > 0 else 0
    count = min(components, rank)
    projections = projections[:, :count]
    for j in range(count):
        pivot = np.argmax(np.abs(projections[:, j]))
        if projections[pivot, j] < 0:
            projections[:, j] = -projections[:, j]
    ratio = evals[:count] / total if total > 0 else np.zeros(0)
    return PCAResult(projections, ratio, count, count < components)


def plot_pca(result: PCAResult, labels: Optional[np.ndarray], path: Union[str, Path]) -> Optional[Path]:
    """二维散点图；主成分不足 2 个时不作图"""
    if result.components < 2:
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(result.projections[:, 0], result.projections[:, 1], c=labels, s=6, cmap="tab10")
    ax.set_xlabel(f"PC1 ({result.explained_variance_ratio[0]:.1%})")
    ax.set_ylabel(f"PC2 ({result.explained_variance_ratio[1]:.1%})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ==================== 归纳偏置探测 ====================

def spatial_interpolation_run(params: UpdateRuleParams, images: np.ndarray, target_h: int, target_w: int,
                              steps: int, sigma: float, rng: np.random.Generator,
                              cell_init: str = "constant") -> np.ndarray:
    """
    在更大 (或更小) 的细胞网格上推理：输入双线性重采样到目标尺寸，位置通道按新分辨率重新计算

    Raises:
        ContractError: 一维 handcrafted 或 learned 位置编码在分辨率改变时无法插值
    """
    grid_shape = params.layout.grid_shape(target_h, target_w)
    positional = params.config.positional
    if grid_shape != (params.grid_h, params.grid_w) and positional in ("handcrafted", "learned"):
        raise ContractError(
            f"{positional} 位置编码按 {params.grid_h}x{params.grid_w} 的一维细胞序号构造，"
            f"无法做空间插值到 {grid_shape[0]}x{grid_shape[1]}；请使用 xy/sincos5/sincos5xy/none")
    resized = resample_images(np.asarray(images, dtype=params.dtype), target_h, target_w, "bilinear")
    return extract_output(infer(params, resized, steps, sigma, rng, cell_init=cell_init))


def reinject_run(params: UpdateRuleParams, images_a: np.ndarray, images_b: np.ndarray, steps: int,
                 sigma: float, rng: np.random.Generator, cell_init: str = "constant") -> Dict[str, Any]:
    """注入 A 收敛后，在同一网格上注入 B 再收敛"""
    rule = UpdateRule(params)
    grid = infer(params, images_a, steps, sigma, rng, rule, cell_init)
    first = extract_output(grid)
    grid = run_steps(inject_input(grid, np.asarray(images_b, dtype=params.dtype)), params, steps,
                     sigma, rng, rule)
    output = extract_output(grid)
    return {
        "first_output": first,
        "output": output,
        "psnr_vs_a": finite_mean(batch_psnr(output, images_a)),
        "psnr_vs_b": finite_mean(batch_psnr(output, images_b)),
    }


def median_run(params: UpdateRuleParams, train_images: np.ndarray, images: np.ndarray, steps: int,
               sigma: float, rng: np.random.Generator, noise_kind: str = "dropout",
               cell_init: str = "constant") -> Dict[str, Any]:
    """
    无掩码：输出与干净输入的 PSNR；
    全掩码：输出与训练集逐像素中位图的距离 (不设通过阈值)
    """
    rule = UpdateRule(params)
    images = np.asarray(images, dtype=params.dtype)
    clean_output = extract_output(infer(params, images, steps, sigma, rng, rule, cell_init))
    full, _ = apply_mask(images, MaskConfig(1, 1, 1.0, noise_kind), rng)
    full_output = extract_output(infer(params, full, steps, sigma, rng, rule, cell_init))
    median = np.median(train_images, axis=0).astype(params.dtype)
    return {
        "clean_output": clean_output,
        "full_mask_output": full_output,
        "median_image": median,
        "no_mask_psnr": finite_mean(batch_psnr(clean_output, images)),
        "full_mask_median_l1": float(np.mean(np.abs(full_output - median[None]))),
        "full_mask_median_psnr": finite_mean(batch_psnr(full_output, np.broadcast_to(median, full_output.shape))),
    }


def unseen_noise_run(params: UpdateRuleParams, images: np.ndarray, configs: Sequence[MaskConfig],
                     steps: int, sigma: float, rng: np.random.Generator, extra_steps: int = 256,
                     tol: float = CONVERGENCE_TOL, window: int = CONVERGENCE_WINDOW,
                     bound: float = DIVERGENCE_BOUND, cell_init: str = "constant") -> List[Dict[str, Any]]:
    """课程之外的掩码配置：T 步后的 PSNR/SSIM，再继续 extra_steps 步判定稳定性"""
    rule = UpdateRule(params)
    images = np.asarray(images, dtype=params.dtype)
    rows = []
    for cfg in configs:
        masked, _ = apply_mask(images, cfg, rng)
        grid = infer(params, masked, steps, sigma, rng, rule, cell_init)
        output = extract_output(grid)
        _, drift, diverged, max_abs = run_with_drift(grid, rule, extra_steps, sigma, rng, bound)
        trace = StabilityTrace(drift, NOT_CONVERGED if diverged else convergence_step(drift, tol, window),
                               diverged, max_abs)
        rows.append({
            "config": cfg.format(),
            "psnr_db": finite_mean(batch_psnr(output, images)),
            "ssim": float(np.mean(batch_ssim(output, images))),
            "noisy_psnr_db": finite_mean(batch_psnr(masked, images)),
            "status": trace.status,
            "max_abs": trace.max_abs,
        })
    return rows


def dump_attention(params: UpdateRuleParams, image: np.ndarray, steps: int, sigma: float,
                   rng: np.random.Generator, directory: Union[str, Path],
                   cell_init: str = "constant") -> List[Path]:
    """
    对单个样本展开 T 步，逐头写出注意力权重 A*：attention_head{j}.npy 形状 (T·depth, N, M)，
    另写出邻域索引表 neighborhood_index.npy
    """
    image = np.asarray(image, dtype=params.dtype)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise DimensionError(f"注意力导出只接受单个样本，实际批大小 {image.shape[0]}")
    captured: List[np.ndarray] = []
    rule = UpdateRule(params, sink=lambda weights: captured.append(weights[0].copy()))
    grid = seed_with_input(params, image, cell_init, rng)
    with no_grad():
        for mask in draw_update_masks(rng, sigma, steps, 1, grid.num_cells):
            grid = rule.step(grid, mask)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stacked = np.stack(captured)                       # (T·depth, h, N, M)
    paths = []
    for head in range(stacked.shape[1]):
        path = directory / f"attention_head{head}.npy"
        np.save(path, stacked[:, head])
        paths.append(path)
    index_path = directory / "neighborhood_index.npy"
    np.save(index_path, rule.neighborhood(grid.grid_h, grid.grid_w))
    paths.append(index_path)
    return paths


# ==================== 服务 ====================

class AnalysisService:
    """
    把分析协议接到运行目录：读取配置中的评估参数，写出 CSV、图像网格与清单摘要

    每个分析使用以主种子构造的独立随机数生成器，结果只依赖 (配置快照, 种子)。
    """

    def __init__(self, config: RunConfig, params: UpdateRuleParams, splits: Dict[str, Dataset],
                 data_service: DataService):
        self.config = config
        self.params = params
        self.splits = splits
        self.data_service = data_service
        self.logging_service = get_logging_service()

    # ---------- 工具 ----------

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng(self.config.seed)

    @property
    def eval_split(self) -> Dataset:
        for name in ("test", "val", "train"):
            if name in self.splits:
                return self.splits[name]
        raise ContractError("没有可用的数据划分")

    def _eval_images(self, count: Optional[int] = None) -> Dataset:
        limit = self.config.eval.max_samples if count is None else count
        return self.eval_split.head(limit)

    @property
    def _noise_kind(self) -> str:
        return default_noise_kind(self.config.model.in_channels, self.config.train.noise_kind)

    def _save_triptych(self, name: str, inputs, outputs, truths, count: int = 8) -> None:
        if self.config.eval.save_images:
            write_triptych(inputs[:count], np.clip(outputs[:count], 0, 1), truths[:count],
                           self.data_service.analysis_path(name))

    def _done(self, name: str, **summary) -> None:
        self.data_service.record(**{name: summary})
        get_event_bus().publish(EventType.ANALYSIS_COMPLETED, {"analysis": name, **summary})
        self.logging_service.info(f"分析 {name} 完成: {summary}", LogCategory.EVAL)

    # ---------- 命令 ----------

    def evaluate(self) -> MetricReport:
        ev = self.config.eval
        dataset = self._eval_images()
        report = evaluate_denoising(self.params, dataset, ev.steps, ev.sigma,
                                    evaluation_configs(dataset.channels, self.config.train.noise_kind),
                                    self._rng(), ev.batch_size, self.config.model.cell_init)
        self.data_service.write_table("denoising.csv", report.to_rows())
        self._done("evaluate", psnr_db=report.psnr_db, ssim=report.ssim,
                   noisy_psnr_db=report.noisy_psnr_db, constant_psnr_db=report.constant_psnr_db)
        return report

    def denoise(self, mask: MaskConfig) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images()
        rng = self._rng()
        truth = dataset.images.astype(self.params.dtype)
        masked, _ = apply_mask(truth, mask, rng)
        output = extract_output(infer(self.params, masked, ev.steps, ev.sigma, rng,
                                      cell_init=self.config.model.cell_init))
        rows = [{"index": k, "psnr_db": p, "ssim": s}
                for k, (p, s) in enumerate(zip(batch_psnr(output, truth), batch_ssim(output, truth)))]
        self.data_service.write_table("denoise.csv", rows)
        self._save_triptych("denoise.pgm" if truth.shape[1] == 1 else "denoise.ppm", masked, output, truth)
        summary = {"mask": mask.format(), "psnr_db": finite_mean(batch_psnr(output, truth)),
                   "noisy_psnr_db": finite_mean(batch_psnr(masked, truth))}
        self._done("denoise", **summary)
        return summary

    def damage(self) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images()
        rng = self._rng()
        mask = MaskConfig(1, 1, 0.5, self._noise_kind)
        truth = dataset.images.astype(self.params.dtype)
        masked, _ = apply_mask(truth, mask, rng)
        result = damage_run(self.params, masked, truth, ev.steps, ev.steps, ev.sigma, rng,
                            self.config.model.cell_init)
        self.data_service.write_table("damage.csv", [result])
        self._done("damage", **result)
        return result

    def stability(self) -> StabilityTrace:
        ev = self.config.eval
        rng = self._rng()
        dataset = self._eval_images(ev.batch_size)
        masked, _ = apply_mask(dataset.images.astype(self.params.dtype),
                               MaskConfig(1, 1, 0.5, self._noise_kind), rng)
        grid = seed_with_input(self.params, masked, self.config.model.cell_init, rng)
        trace = stability_run(self.params, grid, ev.stability_steps, ev.sigma, rng,
                              ev.convergence_tol, ev.convergence_window, ev.divergence_bound)
        self.data_service.write_table(
            "stability.csv", pd.DataFrame({"step": np.arange(1, len(trace.drift) + 1), "drift": trace.drift}))
        self._done("stability", status=trace.status, converged_at=trace.converged_at,
                   max_abs=trace.max_abs)
        return trace

    def sigma_sweep(self) -> Dict[float, int]:
        ev = self.config.eval
        rng = self._rng()
        dataset = self._eval_images(ev.batch_size)
        masked, _ = apply_mask(dataset.images.astype(self.params.dtype),
                               MaskConfig(1, 1, 0.5, self._noise_kind), rng)
        result = update_rate_sweep(self.params, masked, ev.sigma_list, rng, ev.max_converge_steps,
                                   ev.convergence_tol, ev.convergence_window, self.config.model.cell_init)
        self.data_service.write_table("sigma_sweep.csv",
                                      [{"sigma": s, "iterations": n} for s, n in result.items()])
        self._done("sigma_sweep", **{f"sigma={s:g}": n for s, n in result.items()})
        return result

    def head_mask(self, masked_heads: Sequence[int]) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images()
        truth = dataset.images.astype(self.params.dtype)
        masked, _ = apply_mask(truth, MaskConfig(1, 1, 0.5, self._noise_kind), self._rng())
        baseline = head_mask_rollout(self.params, masked, (), ev.steps, ev.sigma, self._rng(),
                                     self.config.model.cell_init)
        output = head_mask_rollout(self.params, masked, masked_heads, ev.steps, ev.sigma, self._rng(),
                                   self.config.model.cell_init)
        result = {"masked_heads": ",".join(str(h) for h in masked_heads),
                  "psnr_db": finite_mean(batch_psnr(output, truth)),
                  "baseline_psnr_db": finite_mean(batch_psnr(baseline, truth))}
        self.data_service.write_table("head_mask.csv", [result])
        self._save_triptych("head_mask.pgm" if truth.shape[1] == 1 else "head_mask.ppm",
                            masked, output, truth)
        self._done("head_mask", **result)
        return result

    def reinject(self) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images()
        if len(dataset) < 2:
            raise ContractError("重新注入需要至少 2 个样本")
        images = dataset.images.astype(self.params.dtype)
        images_b = np.roll(images, 1, axis=0)
        result = reinject_run(self.params, images, images_b, ev.steps, ev.sigma, self._rng(),
                              self.config.model.cell_init)
        summary = {"psnr_vs_a": result["psnr_vs_a"], "psnr_vs_b": result["psnr_vs_b"]}
        self.data_service.write_table("reinject.csv", [summary])
        self._done("reinject", **summary)
        return summary

    def interp(self, height: int, width: int) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images(ev.batch_size)
        output = spatial_interpolation_run(self.params, dataset.images, height, width, ev.steps,
                                           ev.sigma, self._rng(), self.config.model.cell_init)
        summary = {"height": height, "width": width, "min": float(output.min()),
                   "max": float(output.max()), "finite": bool(np.all(np.isfinite(output)))}
        self.data_service.write_table("interp.csv", [summary])
        if ev.save_images:
            write_image_grid(np.clip(output[:8], 0, 1), 4,
                             self.data_service.analysis_path("interp.pgm" if output.shape[1] == 1 else "interp.ppm"))
        self._done("interp", **summary)
        return summary

    def pca(self) -> PCAResult:
        ev = self.config.eval
        dataset = self._eval_images(ev.pca_max_samples)
        rng = self._rng()
        rule = UpdateRule(self.params)
        hidden = []
        for part in _batches(len(dataset), ev.batch_size):
            grid = infer(self.params, dataset.images[part], ev.steps, ev.sigma, rng, rule,
                         self.config.model.cell_init)
            hidden.append(extract_hidden(grid))
        result = pca_hidden(np.concatenate(hidden))
        frame = pd.DataFrame(result.projections, columns=[f"pc{j + 1}" for j in range(result.components)])
        if dataset.labels is not None:
            frame.insert(0, "label", dataset.labels)
        frame.insert(0, "sample", np.arange(len(dataset)))
        self.data_service.write_table("pca_hidden.csv", frame)
        self.data_service.write_table("pca_variance.csv", [
            {"component": j + 1, "explained_variance_ratio": r}
            for j, r in enumerate(result.explained_variance_ratio)])
        if result.degenerate:
            self.logging_service.warning(f"隐藏状态协方差秩不足，只保留 {result.components} 个主成分",
                                         LogCategory.EVAL)
        if ev.save_images:
            plot_pca(result, dataset.labels, self.data_service.analysis_path("pca_hidden.png"))
        self._done("pca", components=result.components, degenerate=result.degenerate,
                   explained=[float(r) for r in result.explained_variance_ratio])
        return result

    def median(self) -> Dict[str, float]:
        ev = self.config.eval
        dataset = self._eval_images()
        result = median_run(self.params, self.splits["train"].images, dataset.images, ev.steps, ev.sigma,
                            self._rng(), self._noise_kind, self.config.model.cell_init)
        summary = {k: result[k] for k in ("no_mask_psnr", "full_mask_median_l1", "full_mask_median_psnr")}
        self.data_service.write_table("median.csv", [summary])
        if ev.save_images:
            ext = "pgm" if dataset.channels == 1 else "ppm"
            write_image_grid(np.concatenate([result["median_image"][None],
                                             np.clip(result["full_mask_output"][:7], 0, 1)]), 8,
                             self.data_service.analysis_path(f"median.{ext}"))
        self._done("median", **summary)
        return summary

    def unseen(self, configs: Optional[Sequence[MaskConfig]] = None) -> List[Dict[str, Any]]:
        ev = self.config.eval
        if configs is None:
            configs = [MaskConfig.parse(text, self._noise_kind) for text in ev.unseen_masks]
        dataset = self._eval_images()
        rows = unseen_noise_run(self.params, dataset.images, configs, ev.steps, ev.sigma, self._rng(),
                                ev.max_converge_steps, ev.convergence_tol, ev.convergence_window,
                                ev.divergence_bound, self.config.model.cell_init)
        self.data_service.write_table("unseen.csv", rows)
        self._done("unseen", **{row["config"]: row["psnr_db"] for row in rows})
        return rows

    def attention(self) -> List[Path]:
        ev = self.config.eval
        dataset = self._eval_images(1)
        rng = self._rng()
        masked, _ = apply_mask(dataset.images.astype(self.params.dtype),
                               MaskConfig(1, 1, 0.5, self._noise_kind), rng)
        directory = self.data_service.run_dir / "analysis" / "attention"
        paths = dump_attention(self.params, masked, ev.steps, ev.sigma, rng, directory,
                               self.config.model.cell_init)
        self.data_service.outputs.extend(str(p.relative_to(self.data_service.run_dir)) for p in paths)
        self._done("attention", files=len(paths))
        return paths
