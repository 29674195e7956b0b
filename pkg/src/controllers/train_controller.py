"""
训练命令控制器：train [--resume PATH] [--preset inverted-bottleneck] [--rollout MODE] [--until N]
"""

from dataclasses import replace
from pathlib import Path

from config.config_system import ModelConfig, RunConfig
from src.common.constants import ExitCode, LogCategory
from src.controllers.base_controller import BaseController, find_run_snapshot
from src.services.checkpoint_service import CheckpointService, resolve_checkpoint
from src.services.training_service import TrainingService


class TrainController(BaseController):
    """组装数据服务、训练服务与检查点服务，执行训练循环"""

    def __init__(self, args, overrides):
        super().__init__("train", args, overrides)

    def customize_config(self, config: RunConfig) -> RunConfig:
        preset = getattr(self.args, "preset", None)
        if preset == "inverted-bottleneck":
            kept = {k: v for k, v in config.model.to_dict().items() if k not in ("embed_dim", "mlp_dim")}
            config.model = ModelConfig.inverted_bottleneck(**kept)
        rollout = getattr(self.args, "rollout", None)
        if rollout:
            config.train = replace(config.train, rollout_mode=rollout)
        return config

    def execute(self) -> int:
        resume = Path(self.args.resume) if getattr(self.args, "resume", None) else None
        run_dir = None
        if resume is not None:
            checkpoint_dir = resolve_checkpoint(resume)
            run_dir = checkpoint_dir.parent.parent
            self.load_config(find_run_snapshot(checkpoint_dir), keep_output_dir=True)
        else:
            self.load_config()

        splits = self.load_splits()
        data_service = self.open_run("train", run_dir or None, subscribe=True)
        trainer = TrainingService(self.config, splits["train"], self.event_bus,
                                  show_progress=getattr(self.args, "progress", False))
        checkpoints = self.services.register_service(
            "checkpoint_service", CheckpointService(data_service.run_dir, self.event_bus))
        checkpoints.start()
        try:
            if resume is not None:
                start = checkpoints.resume(trainer, resolve_checkpoint(resume))
                data_service.truncate_metrics(start)
            finished = trainer.run(getattr(self.args, "until", None))
            if checkpoints.last_saved is None or checkpoints.last_saved.name != f"iter_{finished:06d}":
                checkpoints.save(trainer)
            data_service.record(iterations=finished, parameters=trainer.params.count(),
                                checkpoint=str(checkpoints.last_saved.relative_to(data_service.run_dir)))
            self.logger.info(f"训练完成，运行目录 {data_service.run_dir}", LogCategory.TRAIN)
        finally:
            self.close()
        return ExitCode.OK
