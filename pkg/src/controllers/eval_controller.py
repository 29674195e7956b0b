"""
评估命令控制器：denoise / evaluate / probe
"""

from pathlib import Path

from src.common.constants import ExitCode, LogCategory
from src.common.exceptions import ContractError
from src.controllers.base_controller import BaseController, find_run_snapshot, resolve_params_dir
from src.services.analysis_service import AnalysisService
from src.services.probe_service import ProbeHead, linear_probe
from src.utils.masking import MaskConfig, default_noise_kind


class EvalController(BaseController):
    """加载已训练参数，按命令执行去噪、九配置评估或线性探针"""

    def __init__(self, command: str, args, overrides):
        super().__init__(command, args, overrides)
        self.command = command

    def _prepare(self):
        params_path = Path(self.args.params)
        params_dir = resolve_params_dir(params_path)
        self.load_config(find_run_snapshot(params_dir))
        params = self.load_params(params_dir)
        self.sync_model_config(params)
        splits = self.load_splits()
        data_service = self.open_run(self.command)
        return params, splits, data_service

    def execute(self) -> int:
        params, splits, data_service = self._prepare()
        try:
            if self.command == "probe":
                self._probe(params, splits, data_service)
            else:
                analysis = AnalysisService(self.config, params, splits, data_service)
                if self.command == "denoise":
                    kind = default_noise_kind(self.config.model.in_channels, self.config.train.noise_kind)
                    mask = MaskConfig.parse(self.args.mask, kind)
                    summary = analysis.denoise(mask)
                    self.logger.info(f"去噪 {mask}: PSNR {summary['psnr_db']:.2f} dB "
                                     f"(带噪输入 {summary['noisy_psnr_db']:.2f} dB)", LogCategory.EVAL)
                else:
                    report = analysis.evaluate()
                    self.logger.info(f"评估: PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f}; "
                                     f"带噪输入 {report.noisy_psnr_db:.2f} dB, "
                                     f"常数画布 {report.constant_psnr_db:.2f} dB", LogCategory.EVAL)
        finally:
            self.close()
        return ExitCode.OK

    def _probe(self, params, splits, data_service) -> None:
        if "test" not in splits:
            raise ContractError("probe 需要测试划分 (data.test_fraction > 0 或 data.test_images)")
        ev = self.config.eval
        result = linear_probe(params, splits["train"], splits["test"], ev.steps, ev.sigma, ev.probe_epochs,
                              ev.probe_lr, ev.probe_batch, self.config.seed, self.config.model.cell_init)
        expected = ProbeHead.parameter_count(self.config.model.hidden_channels,
                                             params.grid_h * params.grid_w,
                                             max(splits["train"].num_classes, splits["test"].num_classes))
        row = {"probe_accuracy": result.accuracy, "probe_train_accuracy": result.train_accuracy,
               "pixel_accuracy": result.pixel_accuracy, "probe_parameters": result.parameter_count,
               "pixel_parameters": result.pixel_parameter_count, "expected_probe_parameters": expected}
        data_service.write_table("probe.csv", [row])
        data_service.record(probe=row)
