"""
控制器基类 - 所有命令控制器的抽象基类

负责命令共用的准备工作：解析配置 (文件 + 运行快照 + 点路径覆盖)、
设置数值引擎、打开运行目录、加载数据集与参数。
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from config.config_system import ConfigManager, RunConfig, apply_overrides
from src.common.constants import LogCategory, LogLevel
from src.core.event_bus import EventType, get_event_bus
from src.core.tensor import set_default_dtype
from src.models.dataset import Dataset
from src.models.serialization import PARAMS_FILE, load_params
from src.models.update_rule import UpdateRuleParams
from src.services import ServiceManager
from src.services.checkpoint_service import resolve_checkpoint
from src.services.data_service import CONFIG_SNAPSHOT, DataService, load_datasets, resolve_run_directory
from src.services.logging_service import get_logging_service


def find_run_snapshot(path: Path) -> Optional[Path]:
    """从参数/检查点路径向上查找所属运行目录的配置快照"""
    for directory in (path, *list(path.parents)[:3]):
        snapshot = directory / CONFIG_SNAPSHOT
        if snapshot.exists():
            return snapshot
    return None


def resolve_params_dir(path: Path) -> Path:
    """接受参数目录、检查点目录或运行目录"""
    if (path / PARAMS_FILE).exists():
        return path
    return resolve_checkpoint(path)


class BaseController(ABC):
    """控制器基类"""

    def __init__(self, name: str, args, overrides: Mapping[str, str]):
        self.name = name
        self.args = args
        self.overrides = dict(overrides)
        self.logger = get_logging_service()
        self.event_bus = get_event_bus()
        self.services = ServiceManager()
        self.config: Optional[RunConfig] = None
        self.data_service: Optional[DataService] = None

    @abstractmethod
    def execute(self) -> int:
        """执行命令，返回退出码"""

    # ---------- 配置 ----------

    def load_config(self, snapshot: Optional[Path] = None, keep_output_dir: bool = False) -> RunConfig:
        """
        优先级：--config 文件 > 运行目录快照 > 默认值；之后应用点路径覆盖并整体校验

        从快照继承的 output_dir 默认清空，分析结果写入新的运行目录
        """
        config_file = getattr(self.args, "config", None)
        if not config_file and snapshot is not None:
            config_file = str(snapshot)
        config = ConfigManager(config_file).run_config
        if config_file and not keep_output_dir and not getattr(self.args, "config", None):
            config.output_dir = ""
        config = self.customize_config(config)
        if self.overrides:
            config = apply_overrides(config, self.overrides)
        self.config = config.validate()
        self._configure_engine()
        return self.config

    def customize_config(self, config: RunConfig) -> RunConfig:
        """命令专属的预设 (如 --preset、--rollout)；子类可重写"""
        return config

    def _configure_engine(self) -> None:
        set_default_dtype(np.dtype(self.config.engine.dtype))
        self.logger.set_log_level(LogLevel(self.config.engine.log_level))

    # ---------- 运行目录 ----------

    def open_run(self, command: str, run_dir: Optional[Path] = None, subscribe: bool = False) -> DataService:
        run_dir = run_dir or resolve_run_directory(self.config, command)
        self.data_service = DataService(self.config, run_dir, command,
                                        self.event_bus if subscribe else None)
        self.services.register_service("data_service", self.data_service)
        self.data_service.start()
        self.event_bus.publish(EventType.COMMAND_STARTED, {"command": command, "run_dir": str(run_dir)})
        return self.data_service

    def close(self) -> None:
        self.services.stop_all()
        self.services.clear()
        if self.data_service is not None:
            self.event_bus.publish(EventType.COMMAND_FINISHED, {"command": self.data_service.command,
                                                                "run_dir": str(self.data_service.run_dir)})
            self.data_service = None

    # ---------- 数据与参数 ----------

    def load_splits(self) -> Dict[str, Dataset]:
        dtype = np.dtype(self.config.engine.dtype)
        splits = load_datasets(self.config.data, self.config.model.in_channels, self.config.seed)
        return {name: ds.astype(dtype) for name, ds in splits.items()}

    def load_params(self, path: Path) -> UpdateRuleParams:
        directory = resolve_params_dir(path)
        params = load_params(directory)
        self.logger.info(f"加载参数 {directory}: {params.count()} 个", LogCategory.MODEL)
        return params

    def sync_model_config(self, params: UpdateRuleParams) -> None:
        """模型结构以参数旁注为准"""
        self.config.model = params.config
        self.config.validate()