"""
src/services/probe_service.py
线性探针：冻结 F_θ，在收敛后的隐藏状态上训练 softmax 线性分类器
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from src.common.constants import LogCategory
from src.common.exceptions import ContractError, DimensionError
from src.core import ops
from src.core.tensor import Tensor, backward
from src.models.cell_grid import extract_hidden
from src.models.dataset import Dataset
from src.models.update_rule import UpdateRule, UpdateRuleParams
from src.services.analysis_service import infer
from src.services.logging_service import get_logging_service
from src.services.optim_service import Optimizer


class ProbeHead:
    """weight: (D, classes)，bias: (classes,)；D = C_h·N 或原始像素数"""

    def __init__(self, features: int, classes: int, dtype=np.float64):
        self.tensors = OrderedDict([
            ("weight", Tensor(np.zeros((features, classes), dtype=dtype), requires_grad=True, name="weight")),
            ("bias", Tensor(np.zeros(classes, dtype=dtype), requires_grad=True, name="bias")),
        ])

    @staticmethod
    def parameter_count(hidden_channels: int, num_cells: int, classes: int) -> int:
        return hidden_channels * num_cells * classes + classes

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def logits(self, features: np.ndarray) -> Tensor:
        weight, bias = self.tensors["weight"], self.tensors["bias"]
        return ops.add(ops.matmul(Tensor(features.astype(weight.dtype, copy=False)), weight), bias)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features).data, axis=1)


def fit_probe(features: np.ndarray, labels: np.ndarray, classes: int, epochs: int = 20,
              lr: float = 1e-2, batch_size: int = 64,
              rng: Optional[np.random.Generator] = None) -> ProbeHead:
    """
    小批量 AdamW (无权重衰减) 最小化 softmax 交叉熵

    Raises:
        DimensionError: 样本数与标签数不一致
    """
    if features.shape[0] != labels.shape[0]:
        raise DimensionError(f"特征数 {features.shape[0]} 与标签数 {labels.shape[0]} 不一致")
    rng = rng if rng is not None else np.random.default_rng(0)
    features = features.reshape(features.shape[0], -1)
    head = ProbeHead(features.shape[1], classes, np.float64)
    optimizer = Optimizer(head, "adamw", weight_decay=0.0)
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            loss = ops.cross_entropy(head.logits(features[batch]), labels[batch])
            for tensor in head.tensors.values():
                tensor.grad = None
            backward(loss)
            optimizer.step(head, {name: t.grad for name, t in head.items()}, lr)
    return head


def probe_accuracy(head: ProbeHead, features: np.ndarray, labels: np.ndarray) -> float:
    predictions = head.predict(features.reshape(features.shape[0], -1))
    return float(np.mean(predictions == labels))


def converged_hidden(params: UpdateRuleParams, dataset: Dataset, steps: int, sigma: float,
                     rng: np.random.Generator, batch_size: int = 32,
                     cell_init: str = "constant") -> np.ndarray:
    """干净输入 (不加噪声) 展开 T 步后的隐藏状态 (n, N·C_h)"""
    rule = UpdateRule(params)
    hidden = []
    for start in range(0, len(dataset), batch_size):
        grid = infer(params, dataset.images[start:start + batch_size], steps, sigma, rng, rule, cell_init)
        hidden.append(extract_hidden(grid).reshape(grid.batch, -1))
    return np.concatenate(hidden)


def assert_frozen(before: Dict[str, np.ndarray], params: UpdateRuleParams) -> None:
    """探针训练前后 F_θ 参数必须逐字节一致"""
    for name, tensor in params.items():
        if before[name].tobytes() != tensor.data.tobytes():
            raise ContractError(f"探针训练修改了冻结参数 {name}")


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    pixel_accuracy: float
    parameter_count: int
    pixel_parameter_count: int


def linear_probe(params: UpdateRuleParams, train: Dataset, test: Dataset, steps: int = 64,
                 sigma: float = 0.5, epochs: int = 20, lr: float = 1e-2, batch_size: int = 64,
                 seed: int = 0, cell_init: str = "constant") -> ProbeResult:
    """
    隐藏状态探针与同等预算的原始像素线性基线

    Raises:
        ContractError: 数据集缺少标签
    """
    if train.labels is None or test.labels is None:
        raise ContractError("线性探针需要带标签的数据集")
    logging_service = get_logging_service()
    before = params.snapshot()
    classes = max(train.num_classes, test.num_classes)

    rng = np.random.default_rng(seed)
    train_hidden = converged_hidden(params, train, steps, sigma, rng, batch_size, cell_init)
    test_hidden = converged_hidden(params, test, steps, sigma, rng, batch_size, cell_init)
    head = fit_probe(train_hidden, train.labels, classes, epochs, lr, batch_size, np.random.default_rng(seed))
    assert_frozen(before, params)

    pixels = fit_probe(train.images.reshape(len(train), -1), train.labels, classes, epochs, lr,
                       batch_size, np.random.default_rng(seed))
    result = ProbeResult(
        accuracy=probe_accuracy(head, test_hidden, test.labels),
        train_accuracy=probe_accuracy(head, train_hidden, train.labels),
        pixel_accuracy=probe_accuracy(pixels, test.images.reshape(len(test), -1), test.labels),
        parameter_count=head.count(),
        pixel_parameter_count=pixels.count(),
    )
    logging_service.info(
        f"线性探针: 隐藏状态 {result.accuracy:.2%} ({result.parameter_count} 参数)，"
        f"原始像素 {result.pixel_accuracy:.2%}", LogCategory.EVAL)
    return result
