"""
src/utils/masking.py
patch 噪声掩码与课程式难度表
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from src.common.constants import CURRICULUM_MAX_ITERATION, CURRICULUM_ORDER
from src.common.exceptions import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

NOISE_KINDS = ("dropout", "gaussian")
_TEXT_FORM = re.compile(r"^\s*(\d+)x(\d+)@(\d+(?:\.\d+)?)%(?::(\w+))?\s*$")


def default_noise_kind(channels: int, override: str = "auto") -> str:
    """灰度图用高斯噪声，多通道用 dropout；override 非 auto 时直接采用"""
    if override != "auto":
        return override
    return "gaussian" if channels == 1 else "dropout"


@dataclass(frozen=True)
class MaskConfig:
    """patch 噪声配置"""
    patch_h: int
    patch_w: int
    coverage: float
    noise_kind: str = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ContractError(f"coverage 必须在 [0,1] 内，实际 {self.coverage}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ContractError(f"patch 尺寸必须 ≥ 1，实际 {self.patch_h}x{self.patch_w}")
        if self.noise_kind not in NOISE_KINDS:
            raise ContractError(f"未知噪声类型 {self.noise_kind}")

    def format(self) -> str:
        """紧凑文本形式 PxP@NN%:kind"""
        return f"{self.patch_h}x{self.patch_w}@{self.coverage * 100:g}%:{self.noise_kind}"

    def __str__(self):
        return self.format()

    @classmethod
    def parse(cls, text: str, default_kind: str = "dropout") -> "MaskConfig":
        """
        解析 "2x2@50%:gaussian"；省略 ":kind" 时使用 default_kind

        Raises:
            ConfigError: 文本格式错误或取值越界
        """
        match = _TEXT_FORM.match(text)
        if not match:
            raise ConfigError(f"掩码配置格式错误: {text!r}，应为 PxP@NN%:kind")
        patch_h, patch_w, percent, kind = match.groups()
        try:
            return cls(int(patch_h), int(patch_w), float(percent) / 100.0, kind or default_kind)
        except ContractError as e:
            raise ConfigError(f"掩码配置 {text!r}: {e}")

    def with_kind(self, noise_kind: str) -> "MaskConfig":
        return MaskConfig(self.patch_h, self.patch_w, self.coverage, noise_kind)


class CurriculumSchedule:
    """
    课程式掩码难度表

    第 k 个配置 (从 0 计) 在迭代 ⌈I_max·(2^k − 1)/(2^(K−1) − 1)⌉ 解锁，
    相邻解锁间隔逐级翻倍，最后一个恰在 I_max 解锁。
    """

    def __init__(self, noise_kind: str = "gaussian",
                 order: Sequence[Tuple[int, float]] = CURRICULUM_ORDER,
                 max_iteration: int = CURRICULUM_MAX_ITERATION):
        self.configs: List[MaskConfig] = [MaskConfig(p, p, c, noise_kind) for p, c in order]
        self.max_iteration = max_iteration
        last = len(self.configs) - 1
        self.unlock_iterations: List[int] = [
            0 if last == 0 else math.ceil(max_iteration * (2 ** k - 1) / (2 ** last - 1))
            for k in range(len(self.configs))
        ]

    def available_configs(self, iteration: int) -> List[MaskConfig]:
        if iteration < 0:
            raise ContractError(f"iteration 必须 ≥ 0，实际 {iteration}")
        count = sum(1 for unlock in self.unlock_iterations if unlock <= iteration)
        return self.configs[:count]

    def __len__(self):
        return len(self.configs)


def available_configs(iteration: int, noise_kind: str = "gaussian") -> List[MaskConfig]:
    """默认九级课程在给定迭代时可用的掩码配置"""
    return CurriculumSchedule(noise_kind).available_configs(iteration)


def patch_count(height: int, width: int, cfg: MaskConfig) -> Tuple[int, int]:
    """返回 (patch 总数, 被破坏的 patch 数)；后者为 ⌊coverage·num + 0.5⌋"""
    if height % cfg.patch_h or width % cfg.patch_w:
        raise DimensionError(
            f"patch {cfg.patch_h}x{cfg.patch_w} 无法整除图像尺寸 {height}x{width}")
    total = (height // cfg.patch_h) * (width // cfg.patch_w)
    return total, int(math.floor(cfg.coverage * total + 0.5))


def apply_mask(images: np.ndarray, cfg: MaskConfig,
               rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    对每张图独立随机选取不重叠的 patch 并破坏

    Args:
        images: (B, C, H, W)，取值 [0, 1]
        cfg: 掩码配置
        rng: 随机数生成器

    Returns:
        (masked, mask)；mask 为 (B, 1, H, W) 布尔数组，标记被破坏的像素
    """
    if images.ndim != 4:
        raise DimensionError(f"apply_mask 需要 (B, C, H, W)，实际 {images.shape}")
    batch, _, height, width = images.shape
    total, corrupted = patch_count(height, width, cfg)
    grid_h, grid_w = height // cfg.patch_h, width // cfg.patch_w

    chosen = np.argsort(rng.random((batch, total)), axis=1)[:, :corrupted]
    patch_mask = np.zeros((batch, total), dtype=bool)
    np.put_along_axis(patch_mask, chosen, True, axis=1)
    mask = patch_mask.reshape(batch, grid_h, grid_w)
    mask = np.repeat(np.repeat(mask, cfg.patch_h, axis=1), cfg.patch_w, axis=2)[:, None]

    if cfg.noise_kind == "dropout":
        corrupted_values = np.zeros_like(images)
    else:
        noise = rng.standard_normal(images.shape).astype(images.dtype, copy=False)
        corrupted_values = np.clip(images + noise, 0.0, 1.0)
    masked = np.where(mask, corrupted_values, images)
    return masked, mask


def mask_batch(images: np.ndarray, configs: Sequence[MaskConfig],
               rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, List[MaskConfig]]:
    """为批内每张图从 configs 中均匀抽取一个配置并施加掩码"""
    if not configs:
        raise ContractError("mask_batch: 可用掩码配置为空")
    choices = rng.integers(len(configs), size=images.shape[0])
    masked = np.empty_like(images)
    mask = np.empty((images.shape[0], 1) + images.shape[2:], dtype=bool)
    picked = []
    for b, k in enumerate(choices):
        cfg = configs[int(k)]
        masked[b:b + 1], mask[b:b + 1] = apply_mask(images[b:b + 1], cfg, rng)
        picked.append(cfg)
    return masked, mask, picked
