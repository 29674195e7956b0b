# src/core/application.py
import argparse
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from src import get_version
from src.common.constants import ExitCode, LogCategory, RolloutMode
from src.common.exceptions import ConfigError, ContractError, DataFormatError, DimensionError, DivergenceError
from src.controllers import ANALYSES, create_controller
from src.core.event_bus import EventType, get_event_bus
from src.services.logging_service import get_logging_service


class CommandLineParser(argparse.ArgumentParser):
    """参数错误抛出 ConfigError，由应用统一映射为退出码"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """
    把剩余参数解析为点路径覆盖：--model.heads 4 或 --train.sigma=0.5

    Raises:
        ConfigError: 非 --key 形式的参数，或缺少取值
    """
    overrides: Dict[str, str] = {}
    position = 0
    while position < len(tokens):
        token = tokens[position]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"无法识别的参数: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            position += 1
            if position >= len(tokens):
                raise ConfigError(f"--{key} 缺少取值")
            value = tokens[position]
        overrides[key.replace("-", "_")] = value
        position += 1
    return overrides


def build_parser() -> CommandLineParser:
    parser = CommandLineParser(prog="vitca", description="注意力神经元胞自动机：训练、评估、分析与基准",
                               allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")

    common = CommandLineParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="YAML/JSON 配置文件；其余配置用 --section.key value 覆盖")

    trained = CommandLineParser(add_help=False, allow_abbrev=False)
    trained.add_argument("--params", required=True, help="参数目录、检查点目录或运行目录")

    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    train = commands.add_parser("train", parents=[common], allow_abbrev=False, help="训练更新规则")
    train.add_argument("--resume", help="从检查点 (或运行目录的最新检查点) 继续")
    train.add_argument("--preset", choices=["inverted-bottleneck"])
    train.add_argument("--rollout", choices=[mode.value for mode in RolloutMode])
    train.add_argument("--until", type=int, help="在该迭代保存检查点后停止")
    train.add_argument("--progress", action="store_true", help="显示进度条")

    denoise = commands.add_parser("denoise", parents=[common, trained], allow_abbrev=False,
                                  help="用单一掩码配置去噪")
    denoise.add_argument("--mask", required=True, help='形如 "2x2@50%%:gaussian"')

    commands.add_parser("evaluate", parents=[common, trained], allow_abbrev=False,
                        help="九个课程配置上的 PSNR/SSIM")
    commands.add_parser("probe", parents=[common, trained], allow_abbrev=False, help="隐藏状态线性探针")

    analyze = commands.add_parser("analyze", parents=[common, trained], allow_abbrev=False,
                                  help="鲁棒性与表征分析")
    analyze.add_argument("analysis", choices=ANALYSES)
    analyze.add_argument("--heads", default="0", help="head-mask: 逗号分隔的头序号")
    analyze.add_argument("--size", default="64x64", help="interp: 目标分辨率 HxW")
    analyze.add_argument("--mask", action="append", help="unseen: 掩码配置，可重复")

    bench_attn = commands.add_parser("bench-attn", parents=[common], allow_abbrev=False,
                                     help="局部注意力与全局对照的耗时")
    bench_attn.add_argument("--sizes", default="16,32,64", help="网格边长列表")
    bench_attn.add_argument("--window", type=int, default=3)
    bench_attn.add_argument("--heads", type=int, default=4)
    bench_attn.add_argument("--embed-dim", type=int, default=128)
    bench_attn.add_argument("--repeats", type=int, default=3)

    bench_memory = commands.add_parser("bench-memory", parents=[common], allow_abbrev=False,
                                       help="普通与检查点展开的峰值内存")
    bench_memory.add_argument("--steps", type=int, default=32)
    bench_memory.add_argument("--segments", type=int, default=16)
    bench_memory.add_argument("--batch", type=int)
    return parser


def parse_command_line(argv: Sequence[str]) -> Tuple[argparse.Namespace, Dict[str, str]]:
    args, remaining = build_parser().parse_known_args(list(argv))
    return args, parse_overrides(remaining)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, DivergenceError):
        return ExitCode.DIVERGENCE
    # 数据内容与形状不符 (通道数、尺寸) 与格式错误同属数据错误
    if isinstance(error, (DataFormatError, DimensionError)):
        return ExitCode.DATA
    return ExitCode.USAGE


class VitcaApplication:
    """命令行应用：解析参数、创建控制器、执行并映射退出码"""

    def __init__(self, argv: Optional[List[str]] = None):
        self.argv = list(sys.argv[1:] if argv is None else argv)
        self.event_bus = get_event_bus()
        self.logger = get_logging_service()
        self.controller = None

    def initialize(self) -> None:
        args, overrides = parse_command_line(self.argv)
        self.controller = create_controller(args, overrides)
        self.event_bus.publish(EventType.APPLICATION_INITIALIZED, {"command": args.command})

    def run(self) -> int:
        """运行命令，返回退出码"""
        try:
            self.initialize()
            return int(self.controller.execute())
        except SystemExit as e:
            # --help / --version
            return int(e.code or 0)
        except (ConfigError, ContractError, DataFormatError, DivergenceError) as e:
            category = LogCategory.TRAIN if isinstance(e, DivergenceError) else LogCategory.SYSTEM
            self.logger.error(f"{type(e).__name__}: {e}", category)
            return exit_code_for(e)
        except Exception as e:
            self.logger.critical(f"命令执行发生未捕获异常: {type(e).__name__}: {e}", LogCategory.SYSTEM)
            return ExitCode.USAGE

    def shutdown(self) -> None:
        if self.controller is not None:
            # 异常路径上也要写出清单
            self.controller.close()


def create_application(argv: Optional[List[str]] = None) -> VitcaApplication:
    return VitcaApplication(argv)
