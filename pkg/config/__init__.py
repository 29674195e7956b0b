"""
配置管理模块 - 统一管理运行参数树
"""

from .config_system import (
    ModelConfig, DataConfig, TrainConfig, EvalConfig, EngineConfig, RunConfig,
    ConfigManager, parse_config, serialize_config, apply_overrides
)

__all__ = [
    'ModelConfig', 'DataConfig', 'TrainConfig', 'EvalConfig', 'EngineConfig', 'RunConfig',
    'ConfigManager', 'parse_config', 'serialize_config', 'apply_overrides'
]
