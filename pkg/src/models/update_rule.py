"""
src/models/update_rule.py
ViTCA 更新规则 F_θ

细胞向量 → 线性嵌入 (+ 位置项) → pre-LN 局部 MHSA + 残差 → pre-LN MLP + 残差 →
LN + 线性头 → 输出段与隐藏段的更新向量 ΔZ，按细胞以概率 σ 异步叠加。
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config.config_system import ModelConfig
from src.common.exceptions import ContractError, DimensionError
from src.core import ops
from src.core.tensor import Tensor
from src.models.attention import (
    AttentionSink, attention_scale, build_neighborhood_index, mhsa_localized,
)
from src.models.cell_grid import ADDED_POSITIONAL, CellGrid, CellLayout, sinusoid_table

logger = logging.getLogger(__name__)


class UpdateRuleParams:
    """
    F_θ 的全部可学习参数 (有序、按名称访问)

    W_Q/W_K/W_V 以 d×d 存储，第 i 头使用第 i 个 d/h 列块，因此参数量与头数无关。
    线性头初始化为零，其余权重 He 初始化，偏置 0，LN 增益 1。
    """

    def __init__(self, model_config: ModelConfig, grid_h: int, grid_w: int,
                 tensors: "OrderedDict[str, Tensor]"):
        self.config = model_config
        self.layout = CellLayout.from_config(model_config)
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.tensors = tensors

    @classmethod
    def initialize(cls, model_config: ModelConfig, grid_h: int, grid_w: int,
                   rng: np.random.Generator, dtype=np.float32) -> "UpdateRuleParams":
        layout = CellLayout.from_config(model_config)
        d, m = model_config.embed_dim, model_config.mlp_dim
        if d % model_config.heads:
            raise DimensionError(f"嵌入维度 {d} 不能被头数 {model_config.heads} 整除")

        def he(fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)

        def const(shape, value) -> np.ndarray:
            return np.full(shape, value, dtype=dtype)

        specs: List[Tuple[str, np.ndarray]] = [("embed_w", he(layout.cell_len, (layout.cell_len, d)))]
        if model_config.positional == "learned":
            specs.append(("pos_table", he(d, (grid_h * grid_w, d))))
        for b in range(model_config.depth):
            prefix = f"block{b}."
            specs += [
                (prefix + "ln1_g", const(d, 1.0)), (prefix + "ln1_b", const(d, 0.0)),
                (prefix + "w_q", he(d, (d, d))), (prefix + "w_k", he(d, (d, d))),
                (prefix + "w_v", he(d, (d, d))),
                (prefix + "w_o", he(d, (d, d))), (prefix + "b_o", const(d, 0.0)),
                (prefix + "ln2_g", const(d, 1.0)), (prefix + "ln2_b", const(d, 0.0)),
                (prefix + "mlp_w1", he(d, (d, m))), (prefix + "mlp_b1", const(m, 0.0)),
                (prefix + "mlp_w2", he(m, (m, d))), (prefix + "mlp_b2", const(d, 0.0)),
            ]
        specs += [
            ("ln_head_g", const(d, 1.0)), ("ln_head_b", const(d, 0.0)),
            ("head_w", const((d, layout.update_len), 0.0)),
            ("head_b", const(layout.update_len, 0.0)),
        ]
        tensors = OrderedDict(
            (name, Tensor(value, requires_grad=True, name=name)) for name, value in specs)
        logger.debug(f"初始化更新规则参数: {len(tensors)} 个张量")
        return cls(model_config, grid_h, grid_w, tensors)

    # --- 容器接口 ---
    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return self["embed_w"].dtype

    def count(self) -> int:
        """参数总数"""
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.tensors.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        """参数取值的深拷贝"""
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def copy(self) -> "UpdateRuleParams":
        tensors = OrderedDict((name, Tensor(t.data.copy(), requires_grad=True, name=name))
                              for name, t in self.tensors.items())
        return UpdateRuleParams(self.config, self.grid_h, self.grid_w, tensors)

    def positional_term(self, grid_h: int, grid_w: int) -> Optional[Tensor]:
        """相加型位置项 (N, d)；其他编码返回 None"""
        kind = self.config.positional
        if kind not in ADDED_POSITIONAL:
            return None
        if kind == "learned":
            if (grid_h, grid_w) != (self.grid_h, self.grid_w):
                raise DimensionError(
                    f"learned 位置表按 {self.grid_h}x{self.grid_w} 训练，无法用于 {grid_h}x{grid_w}")
            return self["pos_table"]
        return Tensor(sinusoid_table(grid_h * grid_w, self.config.embed_dim).astype(self.dtype))


class UpdateRule:
    """
    F_θ 前向：持有参数与邻域索引缓存

    Args:
        params: 参数
        masked_heads: 需要屏蔽的注意力头
        sink: 注意力权重回调 (用于导出 A*)
        global_oracle: 用带状掩码全局注意力替换局部注意力
    """

    def __init__(self, params: UpdateRuleParams, masked_heads: Sequence[int] = (),
                 sink: Optional[AttentionSink] = None, global_oracle: bool = False):
        self.params = params
        self.masked_heads = tuple(masked_heads)
        self.sink = sink
        self.global_oracle = global_oracle
        cfg = params.config
        self.scale = attention_scale(cfg.embed_dim, cfg.heads, cfg.attention_scale)
        self._index_cache: Dict[Tuple[int, int], np.ndarray] = {}
        self._positional_cache: Dict[Tuple[int, int], Optional[Tensor]] = {}

    def neighborhood(self, grid_h: int, grid_w: int) -> np.ndarray:
        key = (grid_h, grid_w)
        if key not in self._index_cache:
            cfg = self.params.config
            self._index_cache[key] = build_neighborhood_index(
                grid_h, grid_w, cfg.window_h, cfg.window_w, cfg.boundary)
        return self._index_cache[key]

    def tokenize(self, grid: CellGrid) -> Tensor:
        """tokens = flatten(cells)·E (+ 相加型位置项)，无类别 token"""
        embed = self.params["embed_w"]
        if grid.layout.cell_len != embed.shape[0]:
            raise DimensionError(f"细胞长度 L={grid.layout.cell_len} 与嵌入矩阵行数 {embed.shape[0]} 不一致")
        tokens = ops.matmul(grid.cells, embed)
        key = (grid.grid_h, grid.grid_w)
        if self.params.config.positional == "learned":
            positional = self.params.positional_term(*key)
        else:
            if key not in self._positional_cache:
                self._positional_cache[key] = self.params.positional_term(*key)
            positional = self._positional_cache[key]
        if positional is not None:
            tokens = ops.add(tokens, positional)
        return tokens

    def update_vectors(self, grid: CellGrid) -> Tensor:
        """ΔZ: (B, N, L_out)"""
        p = self.params
        cfg = p.config
        index = self.neighborhood(grid.grid_h, grid.grid_w)
        x = self.tokenize(grid)
        for b in range(cfg.depth):
            prefix = f"block{b}."
            h = ops.layer_norm(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
            attended = mhsa_localized(
                h, p[prefix + "w_q"], p[prefix + "w_k"], p[prefix + "w_v"],
                p[prefix + "w_o"], p[prefix + "b_o"], index, cfg.heads, self.scale,
                masked_heads=self.masked_heads, sink=self.sink, global_oracle=self.global_oracle)
            x = ops.add(x, attended)
            h = ops.layer_norm(x, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
            h = ops.gelu(ops.add(ops.matmul(h, p[prefix + "mlp_w1"]), p[prefix + "mlp_b1"]))
            x = ops.add(x, ops.add(ops.matmul(h, p[prefix + "mlp_w2"]), p[prefix + "mlp_b2"]))
        h = ops.layer_norm(x, p["ln_head_g"], p["ln_head_b"])
        return ops.add(ops.matmul(h, p["head_w"]), p["head_b"])

    def step(self, grid: CellGrid, update_mask: np.ndarray) -> CellGrid:
        """
        以给定的细胞更新掩码 (B, N) 执行一次 F_θ；只改变输出段与隐藏段
        """
        layout = grid.layout
        if update_mask.shape != (grid.batch, grid.num_cells):
            raise DimensionError(f"更新掩码形状 {update_mask.shape} 应为 {(grid.batch, grid.num_cells)}")
        delta = self.update_vectors(grid)
        gate = Tensor(update_mask.astype(grid.cells.dtype)[..., None])
        delta = ops.mul(delta, gate)

        out_len = layout.output_len
        new_output = ops.add(grid.slab("output"), ops.slice_axis(delta, 0, out_len))
        new_hidden = ops.add(grid.slab("hidden"), ops.slice_axis(delta, out_len, layout.update_len))
        pieces = [grid.slab("input"), new_output]
        if layout.pe_len:
            pieces.append(grid.slab("pe"))
        pieces.append(new_hidden)
        return grid.with_cells(ops.concat(pieces, axis=-1))

    def __call__(self, grid: CellGrid, update_mask: np.ndarray) -> CellGrid:
        return self.step(grid, update_mask)


def draw_update_mask(rng: np.random.Generator, sigma: float, batch: int, num_cells: int) -> np.ndarray:
    """逐细胞独立的 Bernoulli(σ) 更新掩码 (B, N)"""
    if not 0.0 <= sigma <= 1.0:
        raise ContractError(f"σ 必须在 [0,1] 内，实际 {sigma}")
    return rng.random((batch, num_cells)) < sigma


def apply_update_rule(grid: CellGrid, params: UpdateRuleParams, sigma: float,
                      rng: Optional[np.random.Generator] = None,
                      update_mask: Optional[np.ndarray] = None,
                      rule: Optional[UpdateRule] = None) -> CellGrid:
    """
    执行一次异步更新：每个细胞以概率 σ 叠加其 ΔZ

    σ 为 0 或 1 时无需 rng；也可直接给出预先抽取的 update_mask

    Raises:
        ContractError: σ 不在 [0,1]，或需要抽样却未提供 rng
    """
    if not 0.0 <= sigma <= 1.0:
        raise ContractError(f"σ 必须在 [0,1] 内，实际 {sigma}")
    if update_mask is None:
        if sigma in (0.0, 1.0):
            update_mask = np.full((grid.batch, grid.num_cells), sigma == 1.0)
        elif rng is None:
            raise ContractError("0 < σ < 1 时需要 rng")
        else:
            update_mask = draw_update_mask(rng, sigma, grid.batch, grid.num_cells)
    rule = rule if rule is not None else UpdateRule(params)
    return rule.step(grid, update_mask)


def tokenize(grid: CellGrid, params: UpdateRuleParams) -> Tensor:
    return UpdateRule(params).tokenize(grid)

