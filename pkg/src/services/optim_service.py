"""
src/services/optim_service.py
梯度归一化、余弦学习率与优化器 (AdamW / SGD)
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from src.common.constants import GRAD_NORM_EPS
from src.common.exceptions import ContractError, DimensionError
from src.models.update_rule import UpdateRuleParams


def normalize_gradients(grads: Mapping[str, np.ndarray],
                        eps: float = GRAD_NORM_EPS) -> Dict[str, np.ndarray]:
    """每个参数的梯度独立除以 (‖g‖_F + eps)"""
    normalized = {}
    for name, g in grads.items():
        norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        normalized[name] = (g / (norm + eps)).astype(g.dtype, copy=False)
    return normalized


def cosine_lr(i: int, total: int, base_lr: float) -> float:
    """η·(1 + cos(π·i/I))/2，无重启"""
    if total <= 0:
        return base_lr
    if not 0 <= i <= total:
        raise ContractError(f"cosine_lr: 需要 0 ≤ i ≤ I，实际 i={i}, I={total}")
    return base_lr * (1.0 + math.cos(math.pi * i / total)) / 2.0


@dataclass
class OptimizerState:
    """逐参数一阶/二阶矩与步数"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: UpdateRuleParams, **hyper) -> "OptimizerState":
        return cls(m={name: np.zeros_like(t.data) for name, t in params.items()},
                   v={name: np.zeros_like(t.data) for name, t in params.items()}, **hyper)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """展平为 npz 可保存的字典"""
        arrays = {"step": np.array(self.step),
                  "hyper": np.array([self.weight_decay, self.beta1, self.beta2, self.eps])}
        arrays.update({f"m/{k}": a for k, a in self.m.items()})
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "OptimizerState":
        weight_decay, beta1, beta2, eps = (float(x) for x in arrays["hyper"])
        return cls(
            step=int(arrays["step"]),
            m={k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("m/")},
            v={k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("v/")},
            weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
        )


def adamw_step(params: UpdateRuleParams, grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float) -> UpdateRuleParams:
    """
    原地执行一步 AdamW：先解耦权重衰减 p ← p·(1 − lr·λ)，再做偏差修正的矩更新

    Raises:
        DimensionError: 梯度或矩的形状与参数不一致
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape or state.m[name].shape != tensor.shape:
            raise DimensionError(f"adamw: 参数 {name} 形状 {tensor.shape} 与梯度/矩形状不一致")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            tensor.data *= tensor.dtype.type(1.0 - lr * state.weight_decay)
        denom = np.sqrt(v / correction2) + state.eps
        tensor.data -= (lr * (m / correction1) / denom).astype(tensor.dtype, copy=False)
    return params


def sgd_step(params: UpdateRuleParams, grads: Mapping[str, np.ndarray], lr: float) -> UpdateRuleParams:
    """θ ← θ − η·g"""
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise DimensionError(f"sgd: 参数 {name} 形状 {tensor.shape} 与梯度形状 {g.shape} 不一致")
        tensor.data -= (lr * g).astype(tensor.dtype, copy=False)
    return params


class Optimizer:
    """按配置选择 AdamW 或 SGD，持有优化器状态"""

    def __init__(self, params: UpdateRuleParams, kind: str = "adamw", weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adamw", "sgd"):
            raise ContractError(f"未知优化器 {kind}")
        self.kind = kind
        self.state = OptimizerState.zeros_like(params, weight_decay=weight_decay,
                                               beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def from_config(cls, params: UpdateRuleParams, train_config) -> "Optimizer":
        return cls(params, train_config.optimizer, train_config.weight_decay,
                   train_config.beta1, train_config.beta2, train_config.adam_eps)

    def step(self, params: UpdateRuleParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
        if self.kind == "adamw":
            adamw_step(params, grads, self.state, lr)
        else:
            self.state.step += 1
            sgd_step(params, grads, lr)
