"""
重参数化卷积: 冻结的共享滤波器组 W_s (kxk) 后接任务私有的 1x1 调制器 W_t

    y_t = W_t · (W_s * x) + b_t

开启 NFF 时调制器每一行写成 g · v / ‖v‖, 方向与尺度分开学习.
"""
from typing import Dict, Optional, Set, Union

import numpy as np

from ..models.specs import AdaptationMode
from ..tensor import ops
from ..tensor.core import FrozenParameter, Parameter, Tensor
from ..tensor.ops import conv2d, relu
from ..utils.errors import ShapeError
from .base import Module, Taps
from .norm import NormBank

ModulatorInit = str  # identity | orthogonal_U | given


def nff_effective_weight(v: Union[Tensor, np.ndarray], g: Union[Tensor, np.ndarray, float]) -> Tensor:
    """
    NFF 有效权重 g · v / ‖v‖ (按行), 梯度经商法则同时流向 v 与 g
    :param v: 方向, 单行 [c] 或多行 [c_out, c]
    :param g: 尺度, 标量或 [c_out]
    :return: 与 v 同形状, 每行范数等于 |g|
    """
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v))
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=v.dtype))
    norms = np.sqrt((v.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms == 0):
        raise ValueError("NFF 方向向量范数为0, 方向未定义")
    if v.ndim == 1:
        return ops.mul(v, ops.div(g, ops.sqrt(ops.sum(ops.mul(v, v)))))
    norm = ops.sqrt(ops.sum(ops.mul(v, v), axis=1, keepdims=True))
    return ops.mul(v, ops.div(ops.reshape(g, (-1, 1)), norm))


class Modulator:
    """
    单个任务的调制器参数
    :param prefix: 参数名前缀, 形如 layer0.mod.<task>
    :param rows: 初始行 [c_out, r]
    :param bias: 初始偏置 [c_out]
    :param nff: 是否使用 NFF 参数化
    """

    def __init__(self, prefix: str, rows: np.ndarray, bias: np.ndarray, nff: bool,
                 dtype=np.float32):
        self.prefix = prefix
        self.nff = nff
        self.dtype = dtype
        if nff:
            norms = np.sqrt((rows.astype(np.float64) ** 2).sum(axis=1))
            if np.any(norms == 0):
                raise ValueError(f"{prefix}: 初始化行存在零向量, NFF 方向未定义")
            self.v = Parameter(rows, name=f"{prefix}.v", dtype=dtype)
            self.g = Parameter(norms, name=f"{prefix}.g", dtype=dtype)
        else:
            self.w = Parameter(rows, name=f"{prefix}.w", dtype=dtype)
        self.bias = Parameter(bias, name=f"{prefix}.bias", dtype=dtype)

    def effective(self) -> Tensor:
        if self.nff:
            return nff_effective_weight(self.v, self.g)
        return self.w

    def folded(self) -> np.ndarray:
        """部署用的折叠权重 w = g · v / ‖v‖; 已折叠时直接返回 w"""
        if self.nff:
            return nff_effective_weight(self.v.data.astype(np.float64),
                                        self.g.data.astype(np.float64)).data
        return self.w.data.astype(np.float64)

    def fold(self) -> None:
        """把 (v, g) 原地替换为普通的 w"""
        if not self.nff:
            return
        self.w = Parameter(self.folded(), name=f"{self.prefix}.w", dtype=self.dtype)
        del self.v, self.g
        self.nff = False

    def parameters(self) -> Dict[str, Parameter]:
        params = [self.v, self.g] if self.nff else [self.w]
        params.append(self.bias)
        return {p.name: p for p in params}


class RCMConvLayer(Module):
    """
    重参数化卷积层
    :param name: 层名
    :param shared: 共享滤波器组 [r, c_in, k, k], 永远冻结
    :param basis: 基础路径的调制矩阵 [c_out, r] (RI 时为 U)
    :param base_bias: 基础路径偏置 [c_out]
    :param norms: 从原卷积层继承的 BN 集合
    """

    supported_modes = {AdaptationMode.RCM}

    def __init__(self, name: str, shared: np.ndarray, basis: np.ndarray,
                 base_bias: Optional[np.ndarray] = None, stride: int = 1, padding: int = 1,
                 activation: str = 'relu', nff: bool = True, norms: Optional[NormBank] = None,
                 dtype=np.float32):
        super().__init__(name)
        rank, c_in, k, _ = shared.shape
        c_out = basis.shape[0]
        if basis.shape != (c_out, rank):
            raise ShapeError(f"调制基形状 {basis.shape} 应为 ({c_out}, {rank})")
        self.c_in = c_in
        self.c_out = c_out
        self.rank = rank
        self.kernel = k
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.nff = nff
        self.dtype = dtype

        self.shared = FrozenParameter(shared, name=f"{name}.shared", dtype=dtype)
        self.basis = np.asarray(basis, dtype=np.float64)
        self.base_bias = np.zeros(c_out) if base_bias is None else np.asarray(base_bias, np.float64)
        self.norms = norms if norms is not None else NormBank(c_out, name, dtype=dtype)
        self.modulators: Dict[str, Modulator] = {}

    # ------------------------------------------------------------ 调制器

    def add_task_modulator(self, task: str, init: ModulatorInit = 'orthogonal_U',
                           rows: Optional[np.ndarray] = None) -> None:
        """
        为任务分配调制器; NFF 下 v 取初始化行, g 取各行范数
        :param init: identity (W_t = I), orthogonal_U (基础路径的 U), given (使用 rows)
        """
        if init == 'identity':
            if self.rank != self.c_out:
                raise ShapeError(f"{self.name}: 秩 {self.rank} < {self.c_out}, 无法用单位阵初始化")
            init_rows = np.eye(self.c_out)
        elif init == 'orthogonal_U':
            init_rows = self.basis
        elif init == 'given':
            if rows is None:
                raise ValueError("init=given 需要提供 rows")
            init_rows = np.asarray(rows, dtype=np.float64)
            if init_rows.shape != (self.c_out, self.rank):
                raise ShapeError(f"给定调制器形状 {init_rows.shape} 应为 ({self.c_out}, {self.rank})")
        else:
            raise ValueError(f"未知的调制器初始化方式: {init}")
        self.modulators[task] = Modulator(f"{self.name}.mod.{task}", init_rows, self.base_bias,
                                          self.nff, dtype=self.dtype)

    def add_task(self, task: str, adaptation: AdaptationMode, init: ModulatorInit = 'orthogonal_U',
                 rows: Optional[np.ndarray] = None, **kwargs) -> None:
        self.check_new_task(task, adaptation)
        self.add_task_modulator(task, init, rows)
        self.norms.add(task, private=True)
        self.task_modes[task] = adaptation

    def effective_weight(self, task: Optional[str]) -> Tensor:
        if task is None:
            return Tensor(self.basis, dtype=self.dtype)
        return self.modulators[task].effective()

    def _bias(self, task: Optional[str]) -> Tensor:
        if task is None:
            return Tensor(self.base_bias, dtype=self.dtype)
        return self.modulators[task].bias

    # ------------------------------------------------------------ 参数

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {self.shared.name: self.shared}
        params.update(self.norms.state_parameters(self.norms.base))
        for task in self.task_modes:
            params.update(self.modulators[task].parameters())
            params.update(self.norms.state_parameters(self.norms.private[task]))
        return params

    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        params = {self.shared.name: self.shared}
        if task is not None:
            params.update(self.modulators[task].parameters())
        params.update(self.norms.task_parameters(task))
        return params

    def trainable_names(self, task: str, adaptation: AdaptationMode) -> Set[str]:
        self.check_mode(adaptation)
        prefix = f"{self.name}.mod.{task}"
        nff = self.modulators[task].nff if task in self.modulators else self.nff
        keys = ('v', 'g', 'bias') if nff else ('w', 'bias')
        return {f"{prefix}.{key}" for key in keys} | self.norms.private_names(task)

    def named_buffers(self) -> Dict[str, np.ndarray]:
        buffers = {f"{self.name}.basis": self.basis, f"{self.name}.base_bias": self.base_bias}
        buffers.update(self.norms.named_buffers())
        return buffers

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == f"{self.name}.basis":
            self.basis = np.asarray(value, dtype=np.float64).reshape(self.basis.shape)
        elif name == f"{self.name}.base_bias":
            self.base_bias = np.asarray(value, dtype=np.float64).reshape(self.base_bias.shape)
        elif not self.norms.set_buffer(name, value):
            super().set_buffer(name, value)

    def freeze_base(self) -> None:
        # 共享滤波器组本身就是 FrozenParameter, 基础 BN 只在转换前训练
        for param in self.norms.task_parameters(None).values():
            param.trainable = False

    # ------------------------------------------------------------ 前向

    def forward_pre_bn(self, x: Tensor, task: Optional[str] = None) -> Tensor:
        """两段卷积, 中间无非线性: 1x1(W_t) ∘ kxk(W_s)"""
        z = conv2d(x, self.shared, None, self.stride, self.padding)
        weight = ops.reshape(self.effective_weight(task), (self.c_out, self.rank, 1, 1))
        return conv2d(z, weight, self._bias(task))

    def forward(self, x: Tensor, task: Optional[str] = None, mode: str = 'eval',
                taps: Taps = None) -> Tensor:
        self.check_task(task)
        y = self.forward_pre_bn(x, task)
        if taps is not None:
            taps[f"{self.name}:pre"] = y.data
        out = self.norms.forward(y, task, mode)
        if self.activation == 'relu':
            out = relu(out)
        if taps is not None:
            taps[self.name] = out.data
        return out

    def composed_weight(self, task: Optional[str] = None) -> np.ndarray:
        """显式合成的 kxk 卷积核 W_t · W_s, 用于校验两段前向"""
        w_t = self.effective_weight(task).data.astype(np.float64)
        return np.einsum('or,rikl->oikl', w_t, self.shared.data.astype(np.float64))
