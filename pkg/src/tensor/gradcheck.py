from typing import Callable, Dict, Sequence

import numpy as np

from .core import Tensor, backward


def numeric_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """
    中心差分数值梯度, fn 每次调用都重新前向
    :param fn: 返回标量张量的闭包, 读取 target.data
    :param target: 被扰动的张量
    """
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
              step: float = 1e-5) -> Dict[int, float]:
    """
    对比解析梯度与中心差分梯度 (应在 float64 下使用)
    :return: 每个输入的相对误差 (按输入下标)
    """
    for tensor in inputs:
        tensor.grad = None
    backward(fn())
    analytic = [np.array(t.grad, dtype=np.float64, copy=True) for t in inputs]
    for tensor in inputs:
        tensor.grad = None

    errors = {}
    for index, tensor in enumerate(inputs):
        numeric = numeric_gradient(fn, tensor, step)
        errors[index] = relative_error(analytic[index], numeric)
    return errors
