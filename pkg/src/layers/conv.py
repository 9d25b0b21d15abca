from typing import Dict, Optional, Set

import numpy as np

from ..models.specs import AdaptationMode
from ..tensor.core import Parameter, Tensor
from ..tensor.ops import conv2d, relu
from .base import Module, Taps
from .norm import NormBank

_PRIVATE_CONV = {AdaptationMode.TASK_SPECIFIC_CONV, AdaptationMode.SINGLE_TASK}
_PRIVATE_BN = {AdaptationMode.TASK_SPECIFIC_BN, AdaptationMode.SINGLE_TASK}


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvBlock(Module):
    """
    普通卷积块: 卷积 (可选因子化 1x1 混合) -> BN -> 激活
    适配模式决定任务是否拥有私有卷积 (conv-only/single) 与私有 BN (bn-only/single)
    :param name: 层名
    :param c_in: 输入通道
    :param c_out: 输出通道
    :param kernel: 卷积核尺寸 k
    :param factored: 为 True 时卷积写成 kxk 卷积后接 1x1 混合 (用于直接预训练 RC 结构)
    """

    supported_modes = {
        AdaptationMode.FREEZE_ENCODER,
        AdaptationMode.TASK_SPECIFIC_BN,
        AdaptationMode.TASK_SPECIFIC_CONV,
        AdaptationMode.SINGLE_TASK,
    }

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, activation: str = 'relu',
                 factored: bool = False, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.activation = activation
        self.dtype = dtype

        self.weight = Parameter(he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel ** 2),
                                name=f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias", dtype=dtype) if bias else None
        self.mix = None
        if factored:
            self.mix = Parameter(he_normal(rng, (c_out, c_out), c_out), name=f"{name}.mix",
                                 dtype=dtype)
        self.norms = NormBank(c_out, name, dtype=dtype)
        self.private_convs: Dict[str, Dict[str, Parameter]] = {}

    # ------------------------------------------------------------ 参数

    def _conv_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        if task is not None and task in self.private_convs:
            return self.private_convs[task]
        params = {'weight': self.weight}
        if self.bias is not None:
            params['bias'] = self.bias
        if self.mix is not None:
            params['mix'] = self.mix
        return params

    def composite_weight(self, task: Optional[str] = None) -> np.ndarray:
        """等效的单个 kxk 卷积核 W^m (因子化时把 1x1 混合乘进去)"""
        params = self._conv_parameters(task)
        weight = params['weight'].data.astype(np.float64)
        if 'mix' in params:
            weight = np.einsum('oc,cikl->oikl', params['mix'].data.astype(np.float64), weight)
        return weight

    def composite_bias(self, task: Optional[str] = None) -> np.ndarray:
        params = self._conv_parameters(task)
        if 'bias' in params:
            return params['bias'].data.astype(np.float64)
        return np.zeros(self.c_out)

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {p.name: p for p in self._conv_parameters(None).values()}
        params.update(self.norms.state_parameters(self.norms.base))
        for task in self.task_modes:
            if task in self.private_convs:
                params.update({p.name: p for p in self.private_convs[task].values()})
            if task in self.norms.private:
                params.update(self.norms.state_parameters(self.norms.private[task]))
        return params

    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        params = {p.name: p for p in self._conv_parameters(task).values()}
        params.update(self.norms.task_parameters(task))
        return params

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return self.norms.named_buffers()

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if not self.norms.set_buffer(name, value):
            super().set_buffer(name, value)

    def trainable_names(self, task: str, adaptation: AdaptationMode) -> Set[str]:
        self.check_mode(adaptation)
        names: Set[str] = set()
        if adaptation in _PRIVATE_CONV:
            names |= {f"{self.name}.task.{task}.{key}" for key in self._conv_parameters(None)}
        if adaptation in _PRIVATE_BN:
            names |= self.norms.private_names(task)
        return names

    # ------------------------------------------------------------ 任务

    def add_task(self, task: str, adaptation: AdaptationMode, **kwargs) -> None:
        self.check_new_task(task, adaptation)
        if adaptation in _PRIVATE_CONV:
            self.private_convs[task] = {
                key: Parameter(param.data, name=f"{self.name}.task.{task}.{key}",
                               dtype=self.dtype)
                for key, param in self._conv_parameters(None).items()
            }
        self.norms.add(task, private=adaptation in _PRIVATE_BN)
        self.task_modes[task] = adaptation

    # ------------------------------------------------------------ 前向

    def forward_pre_bn(self, x: Tensor, task: Optional[str] = None) -> Tensor:
        params = self._conv_parameters(task)
        bias = params.get('bias')
        if 'mix' in params:
            y = conv2d(x, params['weight'], None, self.stride, self.padding)
            mix = params['mix'].reshape(self.c_out, self.c_out, 1, 1)
            return conv2d(y, mix, bias)
        return conv2d(x, params['weight'], bias, self.stride, self.padding)

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
