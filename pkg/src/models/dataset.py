"""
src/models/dataset.py
图像数据集：(n, C, H, W) 取值 [0,1]，可选标签与划分标记
"""

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from src.common.exceptions import ContractError, DimensionError

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"数据集图像需为 (n, C, H, W)，实际 {self.images.shape}")
        if self.images.shape[0] == 0:
            raise ContractError("数据集为空")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ContractError(
                f"数据集取值需在 [0,1] 内，实际 [{self.images.min()}, {self.images.max()}]")
        if self.labels is not None and self.labels.shape != (self.images.shape[0],):
            raise DimensionError(
                f"标签数 {self.labels.shape} 与图像数 {self.images.shape[0]} 不一致")
        if self.split not in SPLITS:
            raise ContractError(f"未知划分 {self.split}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.images[indices], labels, split or self.split)

    def sample(self, rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """有放回地均匀抽取 count 张图，返回 (images, indices)"""
        indices = rng.integers(len(self), size=count)
        return self.images[indices], indices

    def head(self, count: int) -> "Dataset":
        return self.subset(np.arange(min(count, len(self))))

    def astype(self, dtype) -> "Dataset":
        return replace(self, images=self.images.astype(dtype))


def split_dataset(dataset: Dataset, val_fraction: float, test_fraction: float,
                  seed: int) -> Dict[str, Dataset]:
    """
    按种子确定性地划分为互不相交的 train/val/test

    val/test 为空时对应键缺省
    """
    if not 0.0 <= val_fraction < 1.0 or not 0.0 <= test_fraction < 1.0 \
            or val_fraction + test_fraction >= 1.0:
        raise ContractError(f"划分比例无效: val={val_fraction}, test={test_fraction}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    if n - n_test - n_val < 1:
        raise ContractError(f"样本数 {n} 不足以划分出非空训练集")
    parts = {
        "test": order[:n_test],
        "val": order[n_test:n_test + n_val],
        "train": order[n_test + n_val:],
    }
    return {name: dataset.subset(np.sort(idx), name) for name, idx in parts.items() if idx.size}
