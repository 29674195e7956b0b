"""
src/services/checkpoint_service.py
训练检查点：参数容器 + 优化器状态 + 样本池 + 随机数状态 + 迭代号

目录布局:
    <run>/checkpoints/iter_000010/params.bin
                                 /params.json
                                 /optimizer.npz
                                 /pool.npz
                                 /state.json
    <run>/checkpoints/latest     (文本文件，内容为最新检查点目录名)
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.common.constants import LogCategory
from src.common.exceptions import DataFormatError, ServiceError
from src.core.event_bus import EventBus, EventType
from src.models.serialization import load_params, save_params
from src.models.update_rule import UpdateRuleParams
from src.services import BaseService, ServiceStatus
from src.services.logging_service import get_logging_service
from src.services.optim_service import OptimizerState
from src.services.training_service import SamplePool, TrainingService

OPTIMIZER_FILE = "optimizer.npz"
POOL_FILE = "pool.npz"
STATE_FILE = "state.json"
LATEST_FILE = "latest"


@dataclass
class Checkpoint:
    params: UpdateRuleParams
    optimizer_state: OptimizerState
    pool: SamplePool
    rng_state: Dict[str, Any]
    iteration: int


def checkpoint_name(iteration: int) -> str:
    return f"iter_{iteration:06d}"


def save_checkpoint(directory: Union[str, Path], params: UpdateRuleParams, optimizer_state: OptimizerState,
                    pool: SamplePool, rng: np.random.Generator, iteration: int) -> Path:
    """写出完整检查点；已存在的同名目录会被覆盖"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        save_params(params, directory)
        np.savez(directory / OPTIMIZER_FILE, **optimizer_state.to_arrays())
        np.savez(directory / POOL_FILE, **pool.to_arrays())
        state = {"iteration": iteration, "rng": rng.bit_generator.state}
        (directory / STATE_FILE).write_text(json.dumps(state, indent=2), encoding="utf-8")
    except OSError as e:
        raise ServiceError(f"检查点写入失败 {directory}: {e}") from e
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """
    读取检查点

    Raises:
        DataFormatError: 缺少文件或内容损坏
    """
    directory = Path(directory)
    for name in (OPTIMIZER_FILE, POOL_FILE, STATE_FILE):
        if not (directory / name).exists():
            raise DataFormatError(f"检查点缺少 {name}", path=str(directory))
    params = load_params(directory)
    with np.load(directory / OPTIMIZER_FILE) as arrays:
        optimizer_state = OptimizerState.from_arrays(dict(arrays))
    with np.load(directory / POOL_FILE) as arrays:
        pool = SamplePool.from_arrays(dict(arrays))
    try:
        state = json.loads((directory / STATE_FILE).read_text(encoding="utf-8"))
        iteration, rng_state = int(state["iteration"]), state["rng"]
    except (ValueError, KeyError) as e:
        raise DataFormatError(f"检查点状态文件损坏: {e}", path=str(directory / STATE_FILE)) from e
    return Checkpoint(params, optimizer_state, pool, rng_state, iteration)


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """接受检查点目录、checkpoints 目录或运行目录，返回具体检查点目录"""
    path = Path(path)
    if (path / STATE_FILE).exists():
        return path
    for root in (path, path / "checkpoints"):
        latest = root / LATEST_FILE
        if latest.exists():
            return root / latest.read_text(encoding="utf-8").strip()
    raise DataFormatError("找不到检查点", path=str(path))


class CheckpointService(BaseService):
    """
    订阅 CHECKPOINT_DUE，把训练服务状态写入 <run>/checkpoints
    """

    def __init__(self, run_dir: Union[str, Path], event_bus: EventBus):
        super().__init__("checkpoint_service")
        self.root = Path(run_dir) / "checkpoints"
        self.event_bus = event_bus
        self.logging_service = get_logging_service()
        self.last_saved: Optional[Path] = None

    def start(self) -> bool:
        self.status = ServiceStatus.STARTING
        self.root.mkdir(parents=True, exist_ok=True)
        self.event_bus.subscribe(EventType.CHECKPOINT_DUE, self.on_checkpoint_due)
        self.status = ServiceStatus.RUNNING
        return True

    def stop(self) -> bool:
        self.event_bus.unsubscribe(EventType.CHECKPOINT_DUE, self.on_checkpoint_due)
        self.status = ServiceStatus.STOPPED
        return True

    def on_checkpoint_due(self, trainer: TrainingService) -> None:
        self.save(trainer)

    def save(self, trainer: TrainingService) -> Path:
        directory = save_checkpoint(self.root / checkpoint_name(trainer.iteration), trainer.params,
                                    trainer.optimizer.state, trainer.pool, trainer.rng, trainer.iteration)
        (self.root / LATEST_FILE).write_text(directory.name, encoding="utf-8")
        self.last_saved = directory
        self.logging_service.info(f"检查点已保存: {directory}", LogCategory.TRAIN)
        return directory

    def resume(self, trainer: TrainingService, path: Union[str, Path, None] = None) -> int:
        """把检查点恢复到训练服务中，返回已完成的迭代号"""
        directory = resolve_checkpoint(path if path is not None else self.root)
        checkpoint = load_checkpoint(directory)
        trainer.restore(checkpoint.params, checkpoint.optimizer_state, checkpoint.pool,
                        checkpoint.rng_state, checkpoint.iteration)
        self.logging_service.info(f"已从检查点恢复: {directory}", LogCategory.TRAIN)
        return checkpoint.iteration
