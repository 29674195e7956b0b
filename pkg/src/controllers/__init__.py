"""
控制器层 - 每个命令族一个控制器
"""

from typing import Mapping

from .analysis_controller import ANALYSES, AnalysisController
from .base_controller import BaseController
from .bench_controller import BenchController
from .eval_controller import EvalController
from .train_controller import TrainController

EVAL_COMMANDS = ("denoise", "evaluate", "probe")
BENCH_COMMANDS = ("bench-attn", "bench-memory")


def create_controller(args, overrides: Mapping[str, str]) -> BaseController:
    """按子命令创建控制器"""
    command = args.command
    if command == "train":
        return TrainController(args, overrides)
    if command in EVAL_COMMANDS:
        return EvalController(command, args, overrides)
    if command == "analyze":
        return AnalysisController(args, overrides)
    if command in BENCH_COMMANDS:
        return BenchController(command, args, overrides)
    raise ValueError(f"未知命令: {command}")


__all__ = [
    'ANALYSES', 'BENCH_COMMANDS', 'EVAL_COMMANDS', 'BaseController', 'TrainController', 'EvalController',
    'AnalysisController', 'BenchController', 'create_controller'
]
