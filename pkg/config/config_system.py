"""
配置管理系统
RunConfig 参数树 (model / data / train / eval / engine)、文本形式解析与序列化、命令行点路径覆盖
"""

import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

import yaml

from src.common.constants import CURRICULUM_ORDER, LogCategory, LogLevel, RolloutMode
from src.common.exceptions import ConfigError
from src.services.logging_service import get_logging_service

POSITIONAL_KINDS = ("handcrafted", "learned", "none", "xy", "sincos5", "sincos5xy")
BOUNDARY_MODES = ("wrap", "zero-pad")
ATTENTION_SCALES = ("per-head", "full")
CELL_INITS = ("constant", "random")
DATASET_KINDS = ("synth", "idx")
RESAMPLE_MODES = ("pad", "nearest", "bilinear")
OPTIMIZERS = ("adamw", "sgd")
NOISE_KINDS = ("auto", "dropout", "gaussian")
DTYPES = ("float32", "float64")


def _require(condition: bool, key: str, constraint: str, value: Any) -> None:
    if not condition:
        raise ConfigError(f"{key}={value!r} 违反约束 {constraint}")


def _choice(key: str, value: str, choices) -> None:
    _require(value in choices, key, f"{key} ∈ {{{', '.join(choices)}}}", value)


class _Section:
    """配置段公共逻辑：类型检查与字典转换"""

    SECTION = ""

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]):
        """从字典创建实例；未知键与类型不匹配抛出 ConfigError"""
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"配置段 {cls.SECTION} 必须是映射，实际 {type(data).__name__}")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"未知配置键: {', '.join(cls.SECTION + '.' + k for k in unknown)}")
        values = {name: _coerce(f"{cls.SECTION}.{name}", known[name].type, value)
                  for name, value in data.items()}
        return cls(**values)


def _coerce(key: str, ftype, value):
    """按字段注解类型检查取值 (int 可提升为 float；bool 不当作 int)"""
    if ftype is bool:
        if isinstance(value, bool):
            return value
    elif ftype is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif ftype is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif ftype is str:
        if isinstance(value, str):
            return value
    elif ftype == List[float]:
        if isinstance(value, list):
            return [_coerce(key, float, v) for v in value]
    elif ftype == List[str]:
        if isinstance(value, list):
            return [_coerce(key, str, v) for v in value]
    else:
        return value
    expected = getattr(ftype, "__name__", str(ftype))
    raise ConfigError(f"{key} 类型不匹配: 需要 {expected}，实际 {type(value).__name__} ({value!r})")


@dataclass
class ModelConfig(_Section):
    """更新规则 F_θ 的结构参数"""
    SECTION = "model"

    in_channels: int = 1
    out_channels: int = 1
    hidden_channels: int = 32
    patch_h: int = 1
    patch_w: int = 1
    embed_dim: int = 128
    heads: int = 4
    mlp_dim: int = 128
    depth: int = 1
    experimental_depth: bool = False
    window_h: int = 3
    window_w: int = 3
    positional: str = "handcrafted"
    boundary: str = "wrap"
    attention_scale: str = "per-head"
    cell_init: str = "constant"

    def validate(self) -> None:
        for name in ("in_channels", "out_channels", "hidden_channels", "patch_h", "patch_w",
                     "embed_dim", "heads", "mlp_dim", "depth"):
            _require(getattr(self, name) >= 1, f"model.{name}", f"model.{name} ≥ 1", getattr(self, name))
        _require(self.embed_dim % self.heads == 0, "model.heads",
                 f"embed_dim ({self.embed_dim}) 可被 heads 整除", self.heads)
        _require(self.depth == 1 or self.experimental_depth, "model.depth",
                 "depth > 1 需开启 model.experimental_depth", self.depth)
        for name in ("window_h", "window_w"):
            value = getattr(self, name)
            _require(value >= 1 and value % 2 == 1, f"model.{name}", f"model.{name} 为正奇数", value)
        _choice("model.positional", self.positional, POSITIONAL_KINDS)
        _choice("model.boundary", self.boundary, BOUNDARY_MODES)
        _choice("model.attention_scale", self.attention_scale, ATTENTION_SCALES)
        _choice("model.cell_init", self.cell_init, CELL_INITS)

    @classmethod
    def inverted_bottleneck(cls, **overrides) -> "ModelConfig":
        """小嵌入、宽 MLP 的预设 (d=64, MLP 256)"""
        values = dict(embed_dim=64, mlp_dim=256)
        values.update(overrides)
        return cls(**values)


@dataclass
class DataConfig(_Section):
    """数据集配置"""
    SECTION = "data"

    dataset: str = "synth"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    height: int = 32
    width: int = 32
    resample: str = "pad"
    num_samples: int = 2000
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        _choice("data.dataset", self.dataset, DATASET_KINDS)
        _choice("data.resample", self.resample, RESAMPLE_MODES)
        _require(self.height >= 1, "data.height", "data.height ≥ 1", self.height)
        _require(self.width >= 1, "data.width", "data.width ≥ 1", self.width)
        _require(self.num_samples >= 1, "data.num_samples", "data.num_samples ≥ 1", self.num_samples)
        for name in ("val_fraction", "test_fraction"):
            value = getattr(self, name)
            _require(0.0 <= value < 1.0, f"data.{name}", f"data.{name} ∈ [0, 1)", value)
        _require(self.val_fraction + self.test_fraction < 1.0, "data.test_fraction",
                 "val_fraction + test_fraction < 1", self.val_fraction + self.test_fraction)
        if self.dataset == "idx":
            _require(bool(self.train_images), "data.train_images", "idx 数据集需要 train_images 路径",
                     self.train_images)


@dataclass
class TrainConfig(_Section):
    """训练循环超参数"""
    SECTION = "train"

    iterations: int = 100000
    batch_size: int = 32
    sigma: float = 0.5
    t_min: int = 8
    t_max: int = 32
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    pool_size: int = 1024
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    rollout_mode: str = "plain"
    checkpoint_segments: int = 0
    fusion_pre: int = 2
    fusion_post: int = 2
    noise_kind: str = "auto"
    checkpoint_every: int = 1000
    log_every: int = 100

    def validate(self) -> None:
        _require(self.iterations >= 0, "train.iterations", "train.iterations ≥ 0", self.iterations)
        _require(self.batch_size >= 1, "train.batch_size", "train.batch_size ≥ 1", self.batch_size)
        _require(0.0 <= self.sigma <= 1.0, "train.sigma", "σ∈[0,1]", self.sigma)
        _require(self.t_min >= 1, "train.t_min", "train.t_min ≥ 1", self.t_min)
        _require(self.t_min <= self.t_max, "train.t_max", "T_min ≤ T_max", self.t_max)
        _require(self.lr > 0, "train.lr", "train.lr > 0", self.lr)
        _require(self.alpha >= 0, "train.alpha", "α ≥ 0", self.alpha)
        _require(self.beta >= 0, "train.beta", "β ≥ 0", self.beta)
        _require(self.batch_size <= self.pool_size, "train.pool_size", "b ≤ N_P", self.pool_size)
        _choice("train.optimizer", self.optimizer, OPTIMIZERS)
        _require(0.0 <= self.beta1 < 1.0, "train.beta1", "β₁∈[0,1)", self.beta1)
        _require(0.0 <= self.beta2 < 1.0, "train.beta2", "β₂∈[0,1)", self.beta2)
        _require(self.adam_eps > 0, "train.adam_eps", "train.adam_eps > 0", self.adam_eps)
        _require(self.weight_decay >= 0, "train.weight_decay", "train.weight_decay ≥ 0", self.weight_decay)
        _choice("train.rollout_mode", self.rollout_mode, [m.value for m in RolloutMode])
        _require(self.checkpoint_segments >= 0, "train.checkpoint_segments",
                 "train.checkpoint_segments ≥ 0 (0 表示 ⌊T/2⌋)", self.checkpoint_segments)
        _require(self.checkpoint_segments <= self.t_min, "train.checkpoint_segments",
                 "segments ≤ T_min", self.checkpoint_segments)
        _require(self.fusion_pre >= 1, "train.fusion_pre", "train.fusion_pre ≥ 1", self.fusion_pre)
        _require(self.fusion_post >= 1, "train.fusion_post", "train.fusion_post ≥ 1", self.fusion_post)
        if self.rollout_mode == RolloutMode.FUSION_MITOSIS.value:
            minimum = self.fusion_pre + self.fusion_post + 1
            _require(self.t_min >= minimum, "train.t_min",
                     f"fusion-mitosis 需要 T_min ≥ {minimum}", self.t_min)
        _choice("train.noise_kind", self.noise_kind, NOISE_KINDS)
        _require(self.checkpoint_every >= 0, "train.checkpoint_every",
                 "train.checkpoint_every ≥ 0", self.checkpoint_every)
        _require(self.log_every >= 1, "train.log_every", "train.log_every ≥ 1", self.log_every)


@dataclass
class EvalConfig(_Section):
    """评估与分析协议配置"""
    SECTION = "eval"

    steps: int = 64
    sigma: float = 0.5
    batch_size: int = 32
    max_samples: int = 256
    stability_steps: int = 2784
    convergence_tol: float = 1e-3
    convergence_window: int = 8
    max_converge_steps: int = 256
    divergence_bound: float = 10.0
    sigma_list: List[float] = field(default_factory=lambda: [0.25, 0.5, 1.0])
    unseen_masks: List[str] = field(default_factory=lambda: ["8x8@50%", "1x1@90%"])
    pca_max_samples: int = 10000
    probe_epochs: int = 20
    probe_lr: float = 1e-2
    probe_batch: int = 64
    save_images: bool = True

    def validate(self) -> None:
        from src.utils.masking import MaskConfig

        for name in ("steps", "batch_size", "max_samples", "stability_steps",
                     "convergence_window", "max_converge_steps", "probe_epochs", "probe_batch"):
            _require(getattr(self, name) >= 1, f"eval.{name}", f"eval.{name} ≥ 1", getattr(self, name))
        _require(0.0 <= self.sigma <= 1.0, "eval.sigma", "σ∈[0,1]", self.sigma)
        for value in self.sigma_list:
            _require(0.0 <= value <= 1.0, "eval.sigma_list", "σ∈[0,1]", value)
        _require(self.convergence_tol > 0, "eval.convergence_tol", "eval.convergence_tol > 0",
                 self.convergence_tol)
        _require(self.divergence_bound > 0, "eval.divergence_bound", "eval.divergence_bound > 0",
                 self.divergence_bound)
        _require(self.pca_max_samples >= 2, "eval.pca_max_samples", "eval.pca_max_samples ≥ 2",
                 self.pca_max_samples)
        _require(self.probe_lr > 0, "eval.probe_lr", "eval.probe_lr > 0", self.probe_lr)
        for text in self.unseen_masks:
            try:
                MaskConfig.parse(text)
            except ConfigError as e:
                raise ConfigError(f"eval.unseen_masks: {e}")


@dataclass
class EngineConfig(_Section):
    """数值引擎配置"""
    SECTION = "engine"

    dtype: str = "float32"
    log_level: str = "INFO"

    def validate(self) -> None:
        _choice("engine.dtype", self.dtype, DTYPES)
        _choice("engine.log_level", self.log_level, [level.value for level in LogLevel])


@dataclass
class RunConfig:
    """一次运行的完整参数树"""
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    seed: int = 0
    output_dir: str = ""

    SECTIONS = ("model", "data", "train", "eval", "engine")

    def validate(self) -> "RunConfig":
        """逐段校验，再做跨段约束；返回自身便于链式调用"""
        for name in self.SECTIONS:
            getattr(self, name).validate()
        model, data = self.model, self.data
        _require(data.height % model.patch_h == 0, "data.height",
                 f"H 可被 patch_h ({model.patch_h}) 整除", data.height)
        _require(data.width % model.patch_w == 0, "data.width",
                 f"W 可被 patch_w ({model.patch_w}) 整除", data.width)
        largest = max(p for p, _ in CURRICULUM_ORDER)
        _require(data.height % largest == 0 and data.width % largest == 0, "data.height",
                 f"H, W 可被最大课程 patch ({largest}) 整除", (data.height, data.width))
        cells = (data.height // model.patch_h) * (data.width // model.patch_w)
        _require(model.window_h * model.window_w <= cells, "model.window_h",
                 f"邻域大小 M ≤ N ({cells})", model.window_h * model.window_w)
        if self.train.rollout_mode == RolloutMode.FUSION_MITOSIS.value:
            _require((data.height // model.patch_h) % 2 == 0 and (data.width // model.patch_w) % 2 == 0,
                     "data.height", "fusion-mitosis 需要偶数的细胞网格高宽", (data.height, data.width))
            _require(model.positional != "learned", "model.positional",
                     "fusion-mitosis 不支持 learned 位置表", model.positional)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        data = {name: getattr(self, name).to_dict() for name in self.SECTIONS}
        data["seed"] = self.seed
        data["output_dir"] = self.output_dir
        return data

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "RunConfig":
        """从字典创建实例"""
        if data is None:
            data = {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"配置文档顶层必须是映射，实际 {type(data).__name__}")
        allowed = set(cls.SECTIONS) | {"seed", "output_dir"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"未知配置键: {', '.join(unknown)}")
        return cls(
            model=ModelConfig.from_dict(data.get("model")),
            data=DataConfig.from_dict(data.get("data")),
            train=TrainConfig.from_dict(data.get("train")),
            eval=EvalConfig.from_dict(data.get("eval")),
            engine=EngineConfig.from_dict(data.get("engine")),
            seed=_coerce("seed", int, data.get("seed", 0)),
            output_dir=_coerce("output_dir", str, data.get("output_dir", "")),
        )


def parse_config(text: str) -> RunConfig:
    """
    解析配置文本 (YAML，JSON 亦可)；缺省项取默认值，未知键、类型不匹配、越界都抛出 ConfigError
    """
    try:
        document = yaml.safe_load(text) if text and text.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文本格式错误: {e}")
    return RunConfig.from_dict(document).validate()


def serialize_config(config: RunConfig) -> str:
    """输出 parse_config 可逆的文本形式"""
    return yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True)


def apply_overrides(config: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """
    按点路径覆盖配置，如 {"model.heads": "4", "train.sigma": "0.5"}

    取值字符串按 YAML 标量解析后再做类型检查
    """
    data = config.to_dict()
    for path, raw in overrides.items():
        parts = path.split(".")
        try:
            value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} 取值无法解析: {e}")
        if len(parts) == 1:
            if parts[0] not in ("seed", "output_dir"):
                raise ConfigError(f"未知配置键: {path}")
            if parts[0] == "output_dir" and not isinstance(value, str):
                value = str(raw)
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in RunConfig.SECTIONS:
            section = data[parts[0]]
            if parts[1] not in section:
                raise ConfigError(f"未知配置键: {path}")
            if isinstance(section[parts[1]], str) and not isinstance(value, str):
                value = str(raw)
            section[parts[1]] = value
        else:
            raise ConfigError(f"未知配置键: {path}")
    return RunConfig.from_dict(data).validate()


class ConfigManager:
    """配置管理器：从 YAML/JSON 文件加载配置，未指定文件时使用默认值"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = config_file
        self.logger = get_logging_service()
        self.run_config = self._load_config()

    def _load_config(self) -> RunConfig:
        """加载配置；未指定文件时使用默认配置"""
        if not self.config_file:
            return RunConfig().validate()
        if not os.path.exists(self.config_file):
            raise ConfigError(f"配置文件不存在: {self.config_file}")
        with open(self.config_file, 'r', encoding='utf-8') as f:
            config = parse_config(f.read())
        self.logger.info(f"加载配置成功，使用{self.config_file}配置", LogCategory.SYSTEM)
        return config
