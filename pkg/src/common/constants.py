"""
常量定义文件
"""

from enum import Enum


class LogLevel(Enum):
    """日志级别枚举"""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class LogCategory(Enum):
    """日志类别枚举"""
    SYSTEM = "SYSTEM"
    ENGINE = "ENGINE"
    MODEL = "MODEL"
    TRAIN = "TRAIN"
    EVAL = "EVAL"
    DATA = "DATA"
    BENCH = "BENCH"

    def __str__(self):
        """返回枚举的字符串值"""
        return self.value


class ExitCode:
    """命令行退出码"""
    OK = 0
    USAGE = 1
    DATA = 2
    DIVERGENCE = 3


class RolloutMode(Enum):
    """细胞网格展开方式"""
    PLAIN = "plain"
    CHECKPOINTED = "checkpointed"
    FUSION_MITOSIS = "fusion-mitosis"


# 种子状态：输出通道 0.5，隐藏通道 0
SEED_OUTPUT_VALUE = 0.5
SEED_HIDDEN_VALUE = 0.0

# 溢出损失的取值区间
OUTPUT_RANGE = (0.0, 1.0)
HIDDEN_RANGE = (-1.0, 1.0)

# 梯度归一化的分母保护项
GRAD_NORM_EPS = 1e-8

# LayerNorm 的 eps
LAYER_NORM_EPS = 1e-5

# 课程式掩码：最大迭代次数与解锁顺序 (patch 边长, 覆盖率)
CURRICULUM_MAX_ITERATION = 10000
CURRICULUM_ORDER = (
    (1, 0.25), (1, 0.50), (1, 0.75),
    (2, 0.25), (2, 0.50), (2, 0.75),
    (4, 0.25), (4, 0.50), (4, 0.75),
)

# 评估协议
EVAL_STEPS = 64
STABILITY_STEPS = 2784
CONVERGENCE_TOL = 1e-3
CONVERGENCE_WINDOW = 8
DIVERGENCE_BOUND = 10.0
NOT_CONVERGED = -1

# 指标日志固定表头
METRICS_COLUMNS = [
    "iteration", "lr", "T", "loss", "L_rec", "L_o_overflow", "L_h_overflow",
    "pool_size", "wall_ms_forward", "wall_ms_backward", "peak_bytes",
]

# 与机器相关、不参与可复现性比较的列
NONDETERMINISTIC_COLUMNS = ("wall_ms_forward", "wall_ms_backward", "peak_bytes")

RUN_ROOT_ENV = "VITCA_RUN_ROOT"
