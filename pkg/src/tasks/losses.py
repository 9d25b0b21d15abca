import numpy as np

from ..models.specs import LossKind, TaskSpec
from ..tensor import ops
from ..tensor.core import Tensor
from ..utils.errors import ShapeError

NORMALIZE_EPS = 1e-12


def normalize_directions(pred: Tensor) -> Tensor:
    """沿通道维把预测归一化为单位向量 (法向类任务)"""
    norm = ops.sqrt(ops.add(ops.sum(ops.mul(pred, pred), axis=1, keepdims=True), NORMALIZE_EPS))
    return ops.div(pred, norm)


def _dense_target(pred: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=pred.dtype)
    if labels.ndim == pred.ndim - 1:
        labels = labels[:, None]
    if labels.shape != pred.shape:
        raise ShapeError(f"标签形状 {labels.shape} 与预测 {pred.shape} 不符")
    return labels


def task_loss(pred: Tensor, spec: TaskSpec, labels: np.ndarray) -> Tensor:
    """
    按任务配置计算加权损失
    :param pred: 任务头输出 (logits 或回归值)
    :param spec: 任务配置, 决定损失种类与权重
    :param labels: 该任务的标签
    """
    if spec.loss == LossKind.CROSS_ENTROPY:
        loss = ops.softmax_cross_entropy(pred, np.asarray(labels))
    elif spec.loss == LossKind.WEIGHTED_BCE:
        loss = ops.bce_with_logits(pred, _dense_target(pred, labels),
                                   pos_weight=spec.pos_weight, neg_weight=spec.neg_weight)
    elif spec.loss == LossKind.L1:
        target = _dense_target(pred, labels)
        if pred.shape[1] > 1:
            # 方向场: 预测归一化后只在有效像素 (标签非零) 上计 L1
            mask = (np.abs(target).sum(axis=1, keepdims=True) > 0).astype(pred.dtype)
            pred = ops.mul(normalize_directions(pred), mask)
            target = target * mask
        loss = ops.l1_loss(pred, target)
    else:
        raise ValueError(f"未知的损失类型: {spec.loss}")
    return ops.mul(loss, spec.loss_weight)
