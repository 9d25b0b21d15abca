from abc import ABC, abstractmethod
from typing import Dict, Optional, Set

import numpy as np

from ..models.specs import AdaptationMode
from ..tensor.core import Parameter, Tensor
from ..utils.errors import TaskError

# 每层特征图的抓取表: "<层名>:pre" 为 BN 之前的响应, "<层名>" 为层输出
Taps = Optional[Dict[str, np.ndarray]]


class Module(ABC):
    """骨干网络层的抽象基类"""

    # 本层结构支持的适配模式
    supported_modes: Set[AdaptationMode] = set()

    def __init__(self, name: str):
        self.name = name
        self.task_modes: Dict[str, AdaptationMode] = {}

    @abstractmethod
    def forward(self, x: Tensor, task: Optional[str] = None, mode: str = 'eval',
                taps: Taps = None) -> Tensor:
        """
        前向计算
        :param x: 输入 [N, C, H, W]
        :param task: 任务名, None 表示共享的基础路径
        :param mode: train 或 eval, 决定批归一化行为
        :param taps: 若给出, 记录本层 BN 前响应与输出
        """
        pass

    @abstractmethod
    def add_task(self, task: str, adaptation: AdaptationMode, **kwargs) -> None:
        """为新任务分配私有参数, 不触碰其他任务的状态"""
        pass

    @abstractmethod
    def named_parameters(self) -> Dict[str, Parameter]:
        """本层全部参数 (按确定顺序)"""
        pass

    @abstractmethod
    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        """任务前向路径上用到的参数"""
        pass

    @abstractmethod
    def trainable_names(self, task: str, adaptation: AdaptationMode) -> Set[str]:
        """给定模式下该任务在本层可训练的参数名"""
        pass

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(f"{self.name} 没有缓冲区 {name}")

    def freeze_base(self) -> None:
        """注册任务后共享参数不再训练"""
        for param in self.base_parameters().values():
            param.trainable = False

    def base_parameters(self) -> Dict[str, Parameter]:
        return self.task_parameters(None)

    def has_task(self, task: str) -> bool:
        return task in self.task_modes

    def check_task(self, task: Optional[str]) -> None:
        if task is not None and task not in self.task_modes:
            raise TaskError(f"层 {self.name} 上未注册任务: {task}")

    def check_mode(self, adaptation: AdaptationMode) -> None:
        if adaptation not in self.supported_modes:
            supported = sorted(m.value for m in self.supported_modes)
            raise TaskError(
                f"层 {self.name} ({type(self).__name__}) 不支持 {adaptation.value} 模式, "
                f"可选: {supported}")

    def check_new_task(self, task: str, adaptation: AdaptationMode) -> None:
        if task in self.task_modes:
            raise TaskError(f"层 {self.name} 上任务已存在: {task}")
        self.check_mode(adaptation)

    def __str__(self) -> str:
        return f"{type(self).__name__}({self.name}, tasks={sorted(self.task_modes)})"

    def __repr__(self) -> str:
        return self.__str__()
