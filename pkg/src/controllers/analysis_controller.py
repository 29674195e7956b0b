"""
分析命令控制器：analyze <damage|stability|sigma-sweep|head-mask|reinject|interp|pca|median|unseen|attention>
"""

from pathlib import Path
from typing import List, Tuple

from src.common.constants import ExitCode
from src.common.exceptions import ConfigError
from src.controllers.base_controller import BaseController, find_run_snapshot, resolve_params_dir
from src.services.analysis_service import AnalysisService
from src.utils.masking import MaskConfig, default_noise_kind

ANALYSES = ("damage", "stability", "sigma-sweep", "head-mask", "reinject", "interp", "pca", "median",
            "unseen", "attention")


def parse_heads(text: str) -> List[int]:
    """"0,2" -> [0, 2]"""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--heads={text!r} 违反约束 逗号分隔的整数")


def parse_size(text: str) -> Tuple[int, int]:
    """"64x64" -> (64, 64)"""
    try:
        height, width = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size={text!r} 违反约束 形如 HxW")
    return height, width


class AnalysisController(BaseController):

    def __init__(self, args, overrides):
        super().__init__("analyze", args, overrides)
        self.analysis = args.analysis

    def execute(self) -> int:
        params_dir = resolve_params_dir(Path(self.args.params))
        self.load_config(find_run_snapshot(params_dir))
        params = self.load_params(params_dir)
        self.sync_model_config(params)
        splits = self.load_splits()
        data_service = self.open_run(f"analyze-{self.analysis}")
        service = AnalysisService(self.config, params, splits, data_service)
        try:
            if self.analysis == "damage":
                service.damage()
            elif self.analysis == "stability":
                service.stability()
            elif self.analysis == "sigma-sweep":
                service.sigma_sweep()
            elif self.analysis == "head-mask":
                service.head_mask(parse_heads(self.args.heads))
            elif self.analysis == "reinject":
                service.reinject()
            elif self.analysis == "interp":
                service.interp(*parse_size(self.args.size))
            elif self.analysis == "pca":
                service.pca()
            elif self.analysis == "median":
                service.median()
            elif self.analysis == "unseen":
                configs = None
                if self.args.mask:
                    kind = default_noise_kind(self.config.model.in_channels, self.config.train.noise_kind)
                    configs = [MaskConfig.parse(text, kind) for text in self.args.mask]
                service.unseen(configs)
            else:
                service.attention()
        finally:
            self.close()
        return ExitCode.OK
