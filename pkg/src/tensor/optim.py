from typing import Dict, Iterable, List, Optional

import numpy as np

from ..utils.errors import GraphError
from .core import Parameter


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """
    poly 学习率: base_lr * (1 - iter/max_iter)^power
    :param base_lr: 初始学习率
    :param iteration: 当前迭代 (0 <= iteration <= max_iter)
    :param max_iter: 总迭代数
    :param power: 指数, 默认 0.9
    """
    if max_iter <= 0:
        raise ValueError(f"max_iter 必须为正: {max_iter}")
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"迭代数 {iteration} 超出范围 [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float, weight_decay: float,
             buffers: Dict[str, np.ndarray]) -> None:
    """
    带 L2 权重衰减的动量 SGD, 只更新 trainable 参数
    d = grad + wd * p;  buf = momentum * buf + d (首步 buf = d);  p -= lr * buf
    :param buffers: 以参数名为键的动量缓存, 调用方跨步保留
    """
    params = [p for p in params if p.trainable]
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise GraphError(f"可训练参数缺少梯度: {missing[:5]}")

    for param in params:
        direction = param.grad
        if weight_decay:
            direction = direction + weight_decay * param.data
        if momentum:
            buf = buffers.get(param.name)
            buf = direction.copy() if buf is None else momentum * buf + direction
            buffers[param.name] = buf
            direction = buf
        param.data = (param.data - lr * direction).astype(param.dtype, copy=False)


class SGD:
    """
    动量 SGD 优化器, 动量缓存随实例保留 (不进入检查点)
    :param params: 参与优化的参数
    """

    def __init__(self, params: Iterable[Parameter], momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params: List[Parameter] = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self.weight_decay, self.buffers)

    def zero_grad(self, extra: Optional[Iterable[Parameter]] = None) -> None:
        for param in self.params:
            param.grad = None
        for param in extra or ():
            param.grad = None

    def __repr__(self) -> str:
        return f"SGD(params={len(self.params)}, momentum={self.momentum}, wd={self.weight_decay})"
