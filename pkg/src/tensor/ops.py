"""
可微算子: 逐元素运算, 矩阵乘, im2col 卷积, 批归一化, 上采样/池化与损失函数

每个算子都返回带 OpNode 的 Tensor; 输出一律经过有限值检查.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.errors import ShapeError
from .core import OpNode, Parameter, Tensor, check_finite

ArrayLike = Union[Tensor, np.ndarray, float, int]


def _wrap(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _make(data: np.ndarray, kind: str, inputs: Tuple[Tensor, ...], backward_fn,
          cache: Optional[dict] = None) -> Tensor:
    return Tensor(data, node=OpNode(kind, inputs, backward_fn, cache))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


# ---------------------------------------------------------------- 逐元素

def cast(x: Tensor, dtype) -> Tensor:
    source = x.dtype
    return _make(x.data.astype(dtype), 'cast', (x,), lambda g: (g.astype(source),))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, 'add', (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, 'sub', (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, 'mul', (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    with np.errstate(divide='ignore', invalid='ignore'):
        out = a.data / b.data

    def backward(g):
        grad_a = _unbroadcast(g / b.data, a.shape)
        grad_b = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return grad_a, grad_b

    return _make(out, 'div', (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, 'neg', (x,), lambda g: (-g,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid='ignore'):
        out = np.sqrt(x.data)
    return _make(out, 'sqrt', (x,), lambda g: (g / (2.0 * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, 'relu', (x,), lambda g: (g * mask,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, 'matmul', (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- 形状与归约

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), 'sum', (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), 'mean', (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), 'reshape', (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), 'transpose', (x,), lambda g: (g.transpose(inverse),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """NCHW 最近邻上采样"""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _make(out, 'upsample', (x,),
                 lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- 卷积

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """
    把 NCHW 输入展开为 (N*H'*W', C*k*k) 的感受野矩阵
    """
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # (N, C, H', W', k, k) -> (N, H', W', C, k, k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kernel * kernel)


def col2im(cols: np.ndarray, input_shape: Tuple[int, ...], kernel: int, stride: int,
           padding: int) -> np.ndarray:
    n, c, h, w = input_shape
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    cols = cols.reshape(n, out_h, out_w, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ky in range(kernel):
        y_max = ky + stride * out_h
        for kx in range(kernel):
            x_max = kx + stride * out_w
            padded[:, :, ky:y_max:stride, kx:x_max:stride] += cols[:, :, ky, kx, :, :]
    return padded[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """
    二维卷积 (im2col + 矩阵乘)
    :param x: 输入 [N, Cin, H, W]
    :param weight: 卷积核 [Cout, Cin, k, k]
    :param bias: 可选偏置 [Cout]
    :return: 输出 [N, Cout, H', W'], H' = floor((H + 2p - k)/s) + 1
    """
    x = _wrap(x, weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d 需要4维输入和卷积核, 实际 {x.shape}, {weight.shape}")
    c_out, c_in, k_h, k_w = weight.shape
    if k_h != k_w or k_h < 1:
        raise ShapeError(f"只支持正方形卷积核, 实际 {k_h}x{k_w}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"非法的 stride={stride} 或 padding={padding}")
    if x.shape[1] != c_in:
        raise ShapeError(f"输入通道 {x.shape[1]} 与卷积核输入通道 {c_in} 不一致")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"偏置形状 {bias.shape} 应为 ({c_out},)")
    check_finite(x.data, "conv2d 输入")

    n, _, h, w = x.shape
    k = k_h
    out_h = conv_output_size(h, k, stride, padding)
    out_w = conv_output_size(w, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"卷积输出尺寸非法: 输入 {h}x{w}, k={k}, s={stride}, p={padding}")

    dtype = np.result_type(x.dtype, weight.dtype)
    cols = im2col(x.data.astype(dtype, copy=False), k, stride, padding)
    w_mat = weight.data.reshape(c_out, -1).astype(dtype, copy=False)
    out = cols @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_w = (g_mat.T @ cols).reshape(weight.shape).astype(weight.dtype, copy=False)
        grad_x = None
        if x.requires_grad:
            grad_x = col2im(g_mat @ w_mat, x.shape, k, stride, padding).astype(x.dtype, copy=False)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g_mat.sum(axis=0).astype(bias.dtype, copy=False))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), 'conv2d', inputs, backward, {'cols': cols})


# ---------------------------------------------------------------- 批归一化

class BatchNormState:
    """
    批归一化状态: 可学习的 gamma/beta 与滑动统计量
    :param num_features: 通道数 C
    :param name: 参数名前缀
    """

    def __init__(self, num_features: int, name: str, dtype=np.float32):
        self.num_features = num_features
        self.name = name
        self.gamma = Parameter(np.ones(num_features), name=f"{name}.gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(num_features), name=f"{name}.beta", dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def clone(self, name: str) -> 'BatchNormState':
        twin = BatchNormState(self.num_features, name, dtype=self.gamma.dtype)
        twin.gamma.assign(self.gamma.data)
        twin.beta.assign(self.beta.data)
        twin.running_mean = self.running_mean.copy()
        twin.running_var = self.running_var.copy()
        return twin


def batchnorm(x: Tensor, state: BatchNormState, mode: str = 'train', momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """
    批归一化; train 模式用批统计量并更新滑动统计量, eval 模式用滑动统计量
    running_var 用无偏批方差更新, 归一化用有偏方差
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"未知的批归一化模式: {mode}")
    if eps < 0:
        raise ValueError(f"eps 不能为负: {eps}")
    if x.ndim != 4 or x.shape[1] != state.num_features:
        raise ShapeError(f"批归一化输入 {x.shape} 与通道数 {state.num_features} 不符")

    gamma, beta = state.gamma, state.beta
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    if mode == 'train':
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        denom = batch_var + eps
    else:
        batch_mean = state.running_mean.astype(x.dtype)
        denom = state.running_var.astype(x.dtype) + eps
    if np.any(denom <= 0):
        raise ValueError(f"{state.name}: 存在零方差通道且 eps={eps}, 无法归一化")

    inv_std = 1.0 / np.sqrt(denom)
    x_hat = (x.data - batch_mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    if mode == 'train':
        unbiased = batch_var * count / (count - 1) if count > 1 else batch_var
        dtype = state.running_mean.dtype
        state.running_mean = ((1 - momentum) * state.running_mean
                              + momentum * batch_mean).astype(dtype)
        state.running_var = ((1 - momentum) * state.running_var
                             + momentum * unbiased).astype(dtype)

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes).astype(gamma.dtype, copy=False)
        grad_beta = g.sum(axis=axes).astype(beta.dtype, copy=False)
        d_hat = g * gamma.data.reshape(shape)
        if mode == 'train':
            grad_x = (inv_std.reshape(shape) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True))
        else:
            grad_x = d_hat * inv_std.reshape(shape)
        return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta

    return _make(out.astype(x.dtype, copy=False), 'batchnorm', (x, gamma, beta), backward,
                 {'x_hat': x_hat})


# ---------------------------------------------------------------- 损失

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    类别维为第1维的交叉熵, 对所有位置取平均
    :param logits: [N, C, ...]
    :param labels: 整数类别 [N, ...]
    """
    labels = np.asarray(labels)
    if logits.ndim < 2 or labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"交叉熵形状不匹配: logits {logits.shape}, labels {labels.shape}")
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"标签超出类别范围 [0, {num_classes})")

    moved = np.moveaxis(logits.data, 1, -1).reshape(-1, num_classes)
    flat = labels.reshape(-1).astype(np.int64)
    shifted = moved - moved.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    count = flat.size
    loss = -log_probs[np.arange(count), flat].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(count), flat] -= 1.0
        grad = (probs * (g / count)).reshape(labels.shape + (num_classes,))
        return (np.moveaxis(grad, -1, 1).astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), 'cross_entropy', (logits,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray, pos_weight: float = 1.0,
                    neg_weight: float = 1.0) -> Tensor:
    """
    按类别加权的二元交叉熵 (正像素权重 pos_weight, 负像素 neg_weight)
    """
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeError(f"BCE 形状不匹配: {logits.shape} vs {target.shape}")
    z = logits.data
    weight = pos_weight * target + neg_weight * (1.0 - target)
    per_elem = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    loss = (weight * per_elem).mean()
    count = z.size

    def backward(g):
        sigma = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((g / count) * weight * (sigma - target)).astype(logits.dtype, copy=False),

    return _make(np.asarray(loss, dtype=logits.dtype), 'bce', (logits,), backward)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"L1 形状不匹配: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    count = diff.size
    return _make(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), 'l1', (pred,),
                 lambda g: ((g / count) * np.sign(diff),))
