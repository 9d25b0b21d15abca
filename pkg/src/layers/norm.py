from typing import Dict, Optional

import numpy as np

from ..tensor.core import Parameter, Tensor
from ..tensor.ops import BatchNormState, batchnorm

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_BUFFERS = ('running_mean', 'running_var')


class NormBank:
    """
    一层的批归一化集合: 共享(预训练)BN 加上各任务私有 BN
    私有 BN 从共享 BN 克隆, 任务间不共享存储
    :param channels: 通道数
    :param prefix: 层名
    """

    def __init__(self, channels: int, prefix: str, dtype=np.float32):
        self.channels = channels
        self.prefix = prefix
        self.base = BatchNormState(channels, f"{prefix}.bn", dtype=dtype)
        self.private: Dict[str, BatchNormState] = {}

    def add(self, task: str, private: bool) -> None:
        if private:
            self.private[task] = self.base.clone(f"{self.prefix}.task.{task}.bn")

    def state_for(self, task: Optional[str]) -> BatchNormState:
        if task is not None and task in self.private:
            return self.private[task]
        return self.base

    def forward(self, x: Tensor, task: Optional[str], mode: str) -> Tensor:
        # 使用共享 BN 的任务一律走 eval, 共享统计量只在预训练时更新
        if task is not None and task not in self.private:
            mode = 'eval'
        return batchnorm(x, self.state_for(task), mode=mode, momentum=BN_MOMENTUM, eps=BN_EPS)

    def shift_running_mean(self, delta: np.ndarray) -> None:
        """
        所有 BN 的滑动均值加上 delta; 输入少了常数 b 时传 delta = -b,
        eval 模式下 BN(y - b) 与原来的 BN(y) 一致
        """
        for state in [self.base, *self.private.values()]:
            state.running_mean = (state.running_mean + delta).astype(state.running_mean.dtype)

    @staticmethod
    def state_parameters(state: BatchNormState) -> Dict[str, Parameter]:
        return {state.gamma.name: state.gamma, state.beta.name: state.beta}

    def named_parameters(self) -> Dict[str, Parameter]:
        params = self.state_parameters(self.base)
        for state in self.private.values():
            params.update(self.state_parameters(state))
        return params

    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        return self.state_parameters(self.state_for(task))

    def private_names(self, task: str) -> set:
        prefix = f"{self.prefix}.task.{task}.bn"
        return {f"{prefix}.gamma", f"{prefix}.beta"}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        buffers = {}
        for state in [self.base, *self.private.values()]:
            for field in _BUFFERS:
                buffers[f"{state.name}.{field}"] = getattr(state, field)
        return buffers

    def set_buffer(self, name: str, value: np.ndarray) -> bool:
        for state in [self.base, *self.private.values()]:
            for field in _BUFFERS:
                if name == f"{state.name}.{field}":
                    current = getattr(state, field)
                    setattr(state, field, np.asarray(value, dtype=current.dtype).reshape(current.shape))
                    return True
        return False
