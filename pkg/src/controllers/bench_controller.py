"""
基准命令控制器：bench-attn / bench-memory
"""

import numpy as np

from src.common.constants import ExitCode, LogCategory
from src.controllers.base_controller import BaseController
from src.services.benchmark_service import bench_attention, bench_memory, scaling_ratios


class BenchController(BaseController):

    def __init__(self, command: str, args, overrides):
        super().__init__(command, args, overrides)
        self.command = command

    def execute(self) -> int:
        self.load_config()
        data_service = self.open_run(self.command)
        args = self.args
        try:
            if self.command == "bench-attn":
                sizes = [int(s) for s in args.sizes.split(",")]
                frame = bench_attention(sizes, args.window, args.heads, args.embed_dim, args.repeats,
                                        self.config.seed, np.dtype(self.config.engine.dtype))
                data_service.write_table("bench_attn.csv", frame)
                ratios = scaling_ratios(frame)
                data_service.record(scaling_ratios=ratios)
                self.logger.info(f"bench-attn 相邻尺寸耗时比: {ratios}", LogCategory.BENCH)
            else:
                frame = bench_memory(self.config, args.steps, args.segments, args.batch, self.config.seed)
                data_service.write_table("bench_memory.csv", frame)
                plain, checkpointed = frame.iloc[0], frame.iloc[1]
                data_service.record(peak_ratio=float(checkpointed.peak_bytes / max(plain.peak_bytes, 1)),
                                    backward_ratio=float(checkpointed.backward_ms / plain.backward_ms))
        finally:
            self.close()
        return ExitCode.OK
