"""
src/services/data_service.py
运行目录、配置快照、指标 CSV、分析表格、清单 JSON 与数据集加载
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import cv2
import numpy as np
import pandas as pd

from config.config_system import DataConfig, RunConfig, serialize_config
from src import ProjectConfig, get_version
from src.common.constants import LogCategory, METRICS_COLUMNS
from src.common.exceptions import ConfigError, DataFormatError, ServiceError
from src.core.event_bus import EventBus, EventType
from src.models.dataset import Dataset, split_dataset
from src.services import BaseService, ServiceStatus
from src.services.logging_service import get_logging_service
from src.utils.idx_utils import read_idx_images, read_idx_labels
from src.utils.synth_shapes import synth_shapes

CONFIG_SNAPSHOT = "config.yaml"
METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
ANALYSIS_DIR = "analysis"


def resolve_run_directory(config: RunConfig, command: str) -> Path:
    """output_dir 优先；否则 <run_root>/<command>_<时间戳>_seed<seed>"""
    if config.output_dir:
        return Path(config.output_dir)
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    return ProjectConfig.run_root() / f"{command}_{stamp}_seed{config.seed}"


class DataService(BaseService):
    """
    管理一次命令的运行目录

    start() 创建目录、写配置快照、把日志文件绑定到 <run>/logs，并订阅迭代事件追加指标行；
    stop() 取消订阅并写出清单。
    """

    def __init__(self, config: RunConfig, run_dir: Union[str, Path], command: str,
                 event_bus: Optional[EventBus] = None):
        super().__init__("data_service")
        self.config = config
        self.run_dir = Path(run_dir)
        self.command = command
        self.event_bus = event_bus
        self.logging_service = get_logging_service()
        self.metrics_path = self.run_dir / METRICS_FILE
        self.outputs: List[str] = []
        self.summary: Dict[str, Any] = {}
        self.started_at: Optional[str] = None

    def start(self) -> bool:
        try:
            self.status = ServiceStatus.STARTING
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / CONFIG_SNAPSHOT).write_text(serialize_config(self.config), encoding="utf-8")
            self.logging_service.bind_run_directory(self.run_dir, self.command)
            if self.event_bus is not None:
                self.event_bus.subscribe(EventType.ITERATION_COMPLETED, self.append_metrics)
            self.started_at = datetime.now().isoformat(timespec="seconds")
            self.status = ServiceStatus.RUNNING
            self.logging_service.info(f"运行目录: {self.run_dir}", LogCategory.DATA)
            return True
        except OSError as e:
            self.status = ServiceStatus.ERROR
            raise ServiceError(f"数据服务启动失败: {e}") from e

    def stop(self) -> bool:
        self.status = ServiceStatus.STOPPING
        if self.event_bus is not None:
            self.event_bus.unsubscribe(EventType.ITERATION_COMPLETED, self.append_metrics)
        if self.run_dir.exists():
            self.write_manifest()
        self.logging_service.release_file()
        self.status = ServiceStatus.STOPPED
        return True

    # ---------- 指标 ----------

    def append_metrics(self, metrics: Mapping[str, Any]) -> None:
        """按固定表头追加一行；文件不存在时先写表头"""
        row = pd.DataFrame([[metrics[c] for c in METRICS_COLUMNS]], columns=METRICS_COLUMNS)
        header = not self.metrics_path.exists()
        row.to_csv(self.metrics_path, mode="a", header=header, index=False)

    def truncate_metrics(self, last_iteration: int) -> None:
        """续训时丢弃检查点之后已写出的指标行"""
        if not self.metrics_path.exists():
            return
        frame = read_metrics(self.metrics_path)
        frame[frame["iteration"] <= last_iteration].to_csv(self.metrics_path, index=False)

    # ---------- 分析输出 ----------

    def analysis_path(self, name: str) -> Path:
        path = self.run_dir / ANALYSIS_DIR / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(path.relative_to(self.run_dir)))
        return path

    def write_table(self, name: str, rows: Union[pd.DataFrame, Sequence[Mapping[str, Any]]]) -> Path:
        """把表格写成 <run>/analysis/<name>"""
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        path = self.analysis_path(name)
        frame.to_csv(path, index=False)
        self.logging_service.debug(f"表格已写出: {path}", LogCategory.DATA)
        return path

    def record(self, **summary) -> None:
        """记录写入清单的摘要字段"""
        self.summary.update(summary)

    def write_manifest(self) -> Path:
        manifest = {
            "command": self.command,
            "version": get_version(),
            "seed": self.config.seed,
            "started_at": self.started_at,
            "finished_at": datetime.now().isoformat(timespec="seconds"),
            "config": CONFIG_SNAPSHOT,
            "metrics": METRICS_FILE if self.metrics_path.exists() else None,
            "outputs": sorted(set(self.outputs)),
            "summary": self.summary,
            "log_statistics": self.logging_service.get_log_statistics(),
        }
        path = self.run_dir / MANIFEST_FILE
        path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False, default=_json_default),
                        encoding="utf-8")
        return path


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in METRICS_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"指标文件缺少列 {missing}", path=str(path))
    return frame


# ==================== 数据集加载 ====================

def resample_images(images: np.ndarray, height: int, width: int, mode: str = "pad") -> np.ndarray:
    """
    (n, C, h, w) -> (n, C, height, width)

    pad 模式四周补零居中，像素值不变；nearest/bilinear 用 cv2.resize
    """
    n, channels, h, w = images.shape
    if (h, w) == (height, width):
        return images
    if mode == "pad":
        if h > height or w > width:
            raise ConfigError(f"data.resample=pad 无法把 {h}x{w} 缩小到 {height}x{width}")
        top, left = (height - h) // 2, (width - w) // 2
        out = np.zeros((n, channels, height, width), dtype=images.dtype)
        out[:, :, top:top + h, left:left + w] = images
        return out
    interpolation = cv2.INTER_NEAREST if mode == "nearest" else cv2.INTER_LINEAR
    out = np.empty((n, channels, height, width), dtype=images.dtype)
    for k in range(n):
        for c in range(channels):
            out[k, c] = cv2.resize(images[k, c], (width, height), interpolation=interpolation)
    return np.clip(out, 0.0, 1.0)


def load_idx(path_images: Union[str, Path], path_labels: Union[str, Path, None] = None,
             height: Optional[int] = None, width: Optional[int] = None, resample: str = "pad",
             split: str = "train") -> Dataset:
    """
    读取 IDX 图像 (及可选标签)，像素 /255 归一化后按需重采样

    Raises:
        DataFormatError: magic 不符、负载截断或图像与标签数量不一致
    """
    pixels = read_idx_images(path_images)
    images = pixels.astype(np.float32)[:, None] / 255.0
    if height is not None and width is not None:
        images = resample_images(images, height, width, resample)
    labels = None
    if path_labels:
        labels = read_idx_labels(path_labels).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise DataFormatError(f"标签数 {labels.shape[0]} 与图像数 {images.shape[0]} 不一致",
                                  path=str(path_labels))
    return Dataset(images, labels, split)


def load_datasets(data: DataConfig, channels: int, seed: int) -> Dict[str, Dataset]:
    """
    按配置构造 train/val/test 划分

    synth: 生成 num_samples 张合成形状后按比例划分；
    idx: 训练文件划分出 val，给出 test_images 时作为 test，否则从训练文件划分
    """
    logging_service = get_logging_service()
    if data.dataset == "synth":
        corpus = synth_shapes(data.num_samples, data.height, data.width, seed, channels=channels)
        splits = split_dataset(corpus, data.val_fraction, data.test_fraction, seed)
    else:
        if channels != 1:
            raise ConfigError(f"model.in_channels={channels} 违反约束 IDX 数据集为单通道")
        train = load_idx(data.train_images, data.train_labels or None, data.height, data.width,
                         data.resample)
        if data.test_images:
            splits = split_dataset(train, data.val_fraction, 0.0, seed)
            splits["test"] = load_idx(data.test_images, data.test_labels or None, data.height,
                                      data.width, data.resample, split="test")
        else:
            splits = split_dataset(train, data.val_fraction, data.test_fraction, seed)
    logging_service.info(
        "数据集: " + ", ".join(f"{name}={len(ds)}" for name, ds in splits.items()), LogCategory.DATA)
    return splits
