"""
src/core/tensor.py
稠密张量与反向模式自动微分 (梯度带)

Tensor 在创建后只读 (梯度缓冲区除外)；每个由运算产生的 Tensor 记录其输入与反向闭包。
反向传播时从标量损失构建拓扑序的 Tape，逆序遍历一次，结束后释放计算图。
"""

import logging
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.common.exceptions import ContractError

logger = logging.getLogger(__name__)

_state = threading.local()
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """设置存储精度 (默认单精度)"""
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """在该上下文内运算不记录到梯度带"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def enable_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = previous


class MemoryTracker:
    """
    统计存活张量数据缓冲区的字节数与峰值
    依赖 CPython 引用计数释放，结果可复现，不读取进程 RSS
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def allocate(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes


memory_tracker = MemoryTracker()


class TapeNode:
    """一次运算的记录：输入张量 + 反向闭包"""
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: Tuple["Tensor", ...], backward_fn: Callable, op: str):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """参与梯度带的稠密 n 维实数组 (行主序)"""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            array = data
        else:
            array = np.asarray(data, dtype=_default_dtype)

        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None
        self.name = name

        memory_tracker.allocate(array.nbytes)
        weakref.finalize(self, memory_tracker.release, array.nbytes)

    # --- 基本属性 ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- 运算符重载 ---
    def __add__(self, other):
        from src.core import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from src.core import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from src.core import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from src.core import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from src.core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Tape:
    """拓扑有序的运算记录；反向遍历时每个节点恰好访问一次"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        """逆拓扑序传播梯度，扇出处梯度累加"""
        grads = {id(root): seed}
        for tensor in reversed(self.nodes):
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    if tensor.grad is None:
                        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
                    else:
                        tensor.grad = tensor.grad + grad
                continue
            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not (parent.requires_grad or parent._node is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    def release(self) -> None:
        for tensor in self.nodes:
            tensor._node = None
        self.nodes = []


def run_backward(root: Tensor, seed: np.ndarray, retain_graph: bool = False) -> None:
    tape = Tape.from_root(root)
    tape.run(root, np.asarray(seed, dtype=root.dtype))
    if not retain_graph:
        tape.release()


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """
    从标量损失反向传播；每个 requires_grad 叶子得到 dLoss/dLeaf，多次调用累加

    Raises:
        ContractError: 损失不是标量或不在梯度带上
    """
    if loss.size != 1:
        raise ContractError(f"backward 需要标量损失，实际形状 {loss.shape}")
    if loss._node is None and not loss.requires_grad:
        raise ContractError("损失不在梯度带上 (没有任何输入 requires_grad)")
    run_backward(loss, np.ones_like(loss.data), retain_graph=retain_graph)

