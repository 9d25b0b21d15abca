"""
残差适配器基线: 冻结的基础卷积加上任务私有的 1x1 适配卷积

    series:   y = base(x);  out = y + A_t * y
    parallel: out = base(x) + A_t * x      (A_t 与基础卷积同步长)

两种拓扑都在合并之后接任务私有 BN.
"""
from typing import Dict, Optional, Set

import numpy as np

from ..models.specs import AdaptationMode
from ..tensor.core import FrozenParameter, Parameter, Tensor
from ..tensor.ops import add, conv2d, relu
from ..utils.errors import ShapeError
from .base import Module, Taps
from .conv import ConvBlock
from .norm import NormBank

TOPOLOGIES = {
    'series': AdaptationMode.SERIES_RA,
    'parallel': AdaptationMode.PARALLEL_RA,
}


class AdapterLayer(Module):
    """
    :param name: 层名
    :param weight: 基础卷积核 [c_out, c_in, k, k] (冻结)
    :param bias: 基础偏置, 可为 None
    :param topology: series 或 parallel
    """

    def __init__(self, name: str, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                 topology: str = 'series', stride: int = 1, padding: int = 1,
                 activation: str = 'relu', norms: Optional[NormBank] = None, dtype=np.float32):
        super().__init__(name)
        if topology not in TOPOLOGIES:
            raise ValueError(f"未知的适配器拓扑: {topology}, 可选: {sorted(TOPOLOGIES)}")
        c_out, c_in, k, _ = weight.shape
        if topology == 'parallel' and 2 * padding != k - 1:
            # 1x1 旁路与 kxk 主路只有在 "same" 填充下输出尺寸才一致
            raise ShapeError(
                f"{name}: 并联适配器要求 2*padding == k-1 (k={k}, padding={padding}), 步长路径无法对齐")
        self.topology = topology
        self.supported_modes = {TOPOLOGIES[topology]}
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = k
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.dtype = dtype

        self.weight = FrozenParameter(weight, name=f"{name}.weight", dtype=dtype)
        self.bias = FrozenParameter(bias, name=f"{name}.bias", dtype=dtype) if bias is not None else None
        self.norms = norms if norms is not None else NormBank(c_out, name, dtype=dtype)
        self.adapters: Dict[str, Parameter] = {}

    @classmethod
    def from_block(cls, block: ConvBlock, topology: str) -> 'AdapterLayer':
        """由预训练的普通卷积块构造, 因子化的块先合成为单个 kxk 卷积"""
        bias = block.bias.data if block.bias is not None else None
        return cls(block.name, block.composite_weight(), bias, topology=topology,
                   stride=block.stride, padding=block.padding, activation=block.activation,
                   norms=block.norms, dtype=block.dtype)

    @property
    def adapter_shape(self):
        if self.topology == 'series':
            return (self.c_out, self.c_out, 1, 1)
        return (self.c_out, self.c_in, 1, 1)

    def add_task(self, task: str, adaptation: AdaptationMode, **kwargs) -> None:
        self.check_new_task(task, adaptation)
        # 零初始化: 新任务起点与基础网络一致
        self.adapters[task] = Parameter(np.zeros(self.adapter_shape),
                                        name=f"{self.name}.adapter.{task}.weight",
                                        dtype=self.dtype)
        self.norms.add(task, private=True)
        self.task_modes[task] = adaptation

    def _base_parameters(self) -> Dict[str, Parameter]:
        params = {self.weight.name: self.weight}
        if self.bias is not None:
            params[self.bias.name] = self.bias
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        params = self._base_parameters()
        params.update(self.norms.state_parameters(self.norms.base))
        for task in self.task_modes:
            params[self.adapters[task].name] = self.adapters[task]
            params.update(self.norms.state_parameters(self.norms.private[task]))
        return params

    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        params = self._base_parameters()
        if task is not None:
            params[self.adapters[task].name] = self.adapters[task]
        params.update(self.norms.task_parameters(task))
        return params

    def trainable_names(self, task: str, adaptation: AdaptationMode) -> Set[str]:
        self.check_mode(adaptation)
        return {f"{self.name}.adapter.{task}.weight"} | self.norms.private_names(task)

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return self.norms.named_buffers()

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if not self.norms.set_buffer(name, value):
            super().set_buffer(name, value)

    def forward_pre_bn(self, x: Tensor, task: Optional[str] = None) -> Tensor:
        y = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if task is None:
            return y
        adapter = self.adapters[task]
        if self.topology == 'series':
            return add(y, conv2d(y, adapter))
        return add(y, conv2d(x, adapter, None, self.stride, 0))

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
