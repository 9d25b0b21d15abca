"""
稠密张量与反向模式自动微分

Tensor 包装 numpy 数组; 由算子产生的 Tensor 持有一个 OpNode,
记录输入节点和反向函数. backward 按逆拓扑序把梯度写进可达的叶子.
"""
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.errors import GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

# 反向函数: 输入输出梯度, 返回与 inputs 一一对应的梯度 (不需要梯度的位置可为 None)
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} 中出现非有限值 (NaN/Inf)")


class OpNode:
    """计算图中的一个算子节点"""

    __slots__ = ('kind', 'inputs', 'backward_fn', 'cache')

    def __init__(self, kind: str, inputs: Tuple['Tensor', ...], backward_fn: BackwardFn,
                 cache: Optional[dict] = None):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.cache = cache or {}

    def __repr__(self) -> str:
        return f"OpNode({self.kind}, inputs={len(self.inputs)})"


class Tensor:
    """
    稠密数值张量 (float32 训练, float64 用于梯度校验)
    :param data: 数组数据
    :param requires_grad: 叶子张量是否需要梯度
    :param dtype: 可选的目标 dtype
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 node: Optional[OpNode] = None):
        self.data = _as_float_array(data, dtype)
        check_finite(self.data, node.kind if node is not None else "张量")
        self.node = node
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or (
            node is not None and any(t.requires_grad for t in node.inputs))
        self._backward_done = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def astype(self, dtype) -> 'Tensor':
        from . import ops
        return ops.cast(self, dtype)

    # 运算符重载统一转到 ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = self.node.kind if self.node is not None else 'leaf'
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op})"


class Parameter(Tensor):
    """
    模型参数: 始终接收梯度 (分析模块需要冻结参数的梯度), 但 trainable=False 时优化器不更新
    :param value: 初始值
    :param name: 模型内唯一路径名
    :param trainable: 是否允许优化器更新
    """

    def __init__(self, value, name: str, trainable: bool = True, dtype=None):
        super().__init__(np.array(value, copy=True), requires_grad=True, dtype=dtype)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)

    def assign(self, value: np.ndarray) -> None:
        """就地替换数值, 形状必须一致"""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"参数 {self.name} 形状不符: {value.shape} != {self.data.shape}")
        check_finite(value, f"参数 {self.name}")
        self.data = value.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, trainable={self.trainable})"


class FrozenParameter(Parameter):
    """永远不可训练的参数 (共享滤波器组), 试图解冻会直接报错"""

    def __init__(self, value, name: str, dtype=None):
        super().__init__(value, name=name, trainable=False, dtype=dtype)

    @property
    def trainable(self) -> bool:
        return False

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        if flag:
            raise ValueError(f"参数 {self.name} 是冻结的共享滤波器组, 不能设为可训练")


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    从标量损失反向传播, 填充所有可达 Parameter 的 grad
    :param loss: 标量张量, 必须由前向计算得到
    """
    if loss.node is None:
        if loss._backward_done:
            raise GraphError("该损失已经执行过 backward, 计算图已释放")
        raise GraphError("损失不是前向计算的输出, 请先执行前向")
    if loss.size != 1:
        raise ShapeError(f"backward 只接受标量损失, 实际形状 {loss.shape}")

    order = _topological_order(loss)
    leaves = [t for t in order if t.node is None]
    stale = [t for t in leaves if t.grad is not None]
    if stale:
        names = [getattr(t, 'name', repr(t)) for t in stale[:3]]
        raise GraphError(f"梯度未清零就再次 backward: {names}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(order):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor.grad = grad.astype(tensor.dtype, copy=False)
            continue
        input_grads = tensor.node.backward_fn(grad)
        for parent, parent_grad in zip(tensor.node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(
                    f"{tensor.node.kind} 反向梯度形状 {parent_grad.shape} 与输入 {parent.shape} 不符")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad

    # 释放计算图, 同一损失不能重复反向
    for tensor in order:
        tensor.node = None
    loss._backward_done = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.grad = None
