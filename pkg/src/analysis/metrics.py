"""
逐任务评估指标与平均性能下降 Δ_m

Δ_m = (1/P) Σ_i  -(-1)^{l_i} (M_m,i - M_b,i) / M_b,i   (百分比)
l_i = 1 表示越低越好; 比基线差时下降为正.
"""
from typing import Mapping, Union

import numpy as np

from ..models.specs import Direction, DropReport, MetricKind, TaskDrop
from ..utils.errors import ShapeError

F1_THRESHOLD = 0.5

DirectionLike = Union[Direction, str, int]


def _direction(value: DirectionLike) -> Direction:
    if isinstance(value, Direction):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return Direction.LOWER_BETTER if int(value) == 1 else Direction.HIGHER_BETTER
    return Direction(value)


def delta_m(model_metrics: Mapping[str, float], baseline_metrics: Mapping[str, float],
            directions: Mapping[str, DirectionLike]) -> DropReport:
    """
    平均逐任务性能下降
    :param model_metrics: 任务 -> 模型指标 M_m
    :param baseline_metrics: 任务 -> 单任务基线指标 M_b
    :param directions: 任务 -> 指标方向 (Direction, 'higher'/'lower', 或 l_i)
    """
    if set(model_metrics) != set(baseline_metrics) or set(model_metrics) - set(directions):
        raise ValueError(f"任务集合不一致: 模型 {sorted(model_metrics)}, "
                         f"基线 {sorted(baseline_metrics)}, 方向 {sorted(directions)}")
    if not model_metrics:
        raise ValueError("没有可比较的任务")

    per_task = {}
    for task in model_metrics:
        m, b = float(model_metrics[task]), float(baseline_metrics[task])
        if b == 0:
            raise ValueError(f"任务 {task} 的基线指标为0, 相对下降无定义")
        direction = _direction(directions[task])
        sign = -1.0 if direction.l_flag else 1.0
        drop = -sign * (m - b) / b * 100.0
        per_task[task] = TaskDrop(model=m, baseline=b, direction=direction, drop=drop)
    drops = [entry.drop for entry in per_task.values()]
    return DropReport(per_task=per_task, delta_m=sum(drops) / len(drops))


def _check_shapes(pred: np.ndarray, label: np.ndarray) -> None:
    if pred.shape != label.shape:
        raise ShapeError(f"预测形状 {pred.shape} 与标签 {label.shape} 不符")


def mean_iou(pred: np.ndarray, label: np.ndarray) -> float:
    """只对标签中出现的类别取平均"""
    _check_shapes(pred, label)
    classes = np.unique(label)
    if classes.size == 0:
        raise ValueError("标签为空, 无法计算 mIoU")
    ious = []
    for cls in classes:
        p, t = pred == cls, label == cls
        ious.append(np.logical_and(p, t).sum() / np.logical_or(p, t).sum())
    return float(np.mean(ious))


def mean_error(pred: np.ndarray, label: np.ndarray) -> float:
    """
    [N, 2|3, H, W] 的方向场取有效像素 (标签非零) 上的平均角度误差 (度);
    其他形状取平均绝对误差
    """
    _check_shapes(pred, label)
    if pred.ndim == 4 and pred.shape[1] in (2, 3):
        valid = np.linalg.norm(label, axis=1) > 0
        if not np.any(valid):
            raise ValueError("标签中没有有效的方向像素")
        p = np.moveaxis(pred, 1, -1)[valid].astype(np.float64)
        t = np.moveaxis(label, 1, -1)[valid].astype(np.float64)
        p_norm = np.linalg.norm(p, axis=1)
        t_norm = np.linalg.norm(t, axis=1)
        cos = (p * t).sum(axis=1) / np.maximum(p_norm * t_norm, 1e-12)
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())
    return float(np.abs(pred.astype(np.float64) - label).mean())


def rmse(pred: np.ndarray, label: np.ndarray) -> float:
    _check_shapes(pred, label)
    return float(np.sqrt(np.mean((pred.astype(np.float64) - label) ** 2)))


def f1_edge(pred: np.ndarray, label: np.ndarray, threshold: float = F1_THRESHOLD) -> float:
    """阈值化后的边缘 F1, 不允许位置偏移; 预测与标签都没有边缘时记为 1"""
    _check_shapes(pred, label)
    p = pred >= threshold
    t = label > 0
    tp = np.logical_and(p, t).sum()
    if not p.any() and not t.any():
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / t.sum()
    return float(2 * precision * recall / (precision + recall))


def accuracy(pred: np.ndarray, label: np.ndarray) -> float:
    _check_shapes(pred, label)
    if pred.size == 0:
        raise ValueError("没有样本")
    return float(np.mean(pred == label))


_METRICS = {
    MetricKind.MIOU: mean_iou,
    MetricKind.MEAN_ERR: mean_error,
    MetricKind.RMSE: rmse,
    MetricKind.F1_EDGE: f1_edge,
    MetricKind.ACCURACY: accuracy,
}


def task_metrics(pred: np.ndarray, label: np.ndarray, kind: Union[MetricKind, str]) -> float:
    """
    计算单个指标
    :param pred: 解码后的预测 (类别图 / 概率 / 回归值 / 方向场)
    :param label: 标签
    :param kind: miou / mean_err / rmse / f1_edge / accuracy
    """
    return _METRICS[MetricKind(kind)](np.asarray(pred), np.asarray(label))
