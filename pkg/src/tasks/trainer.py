"""
训练循环: SGD + 动量 + 权重衰减 + poly 学习率, 只优化任务可训练集合
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from ..analysis.metrics import task_metrics
from ..data.synthetic import MultiTaskDataset
from ..layers.backbone import Backbone
from ..models.specs import HeadKind, LossKind, MetricKind, TaskSpec, TrainConfig
from ..tensor import ops
from ..tensor.core import FrozenParameter, Parameter, Tensor, backward
from ..tensor.optim import SGD, poly_lr
from ..utils.errors import NonFiniteError, TaskError
from ..utils.logger import get_logger, log_duration
from .losses import normalize_directions, task_loss
from .registry import trainable_parameters

logger = get_logger(__name__)

PRETRAIN_LABEL = 'class_label'
EVAL_BATCH_SIZE = 32


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: Optional[float] = None

    def to_dict(self) -> dict:
        return {'epoch': self.epoch, 'loss': self.loss, 'metric': self.metric}


def _finite_loss(loss: Tensor, where: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"{where}: 损失为非有限值 {value}")
    return value


def _optimize(model: Backbone, params: List[Parameter], data: MultiTaskDataset,
              config: TrainConfig, step: Callable[[np.ndarray, dict], Tensor],
              evaluate: Callable[[], Optional[float]], label: str) -> List[EpochRecord]:
    frozen = [p.name for p in params if isinstance(p, FrozenParameter) or not p.trainable]
    if frozen:
        raise RuntimeError(f"可训练集合中出现冻结参数: {frozen[:5]}")
    optimizer = SGD(params, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps = math.ceil(len(data) / config.batch_size)
    max_iter = config.epochs * steps
    iteration = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        with log_duration(logger, f"{label} 第 {epoch} 轮"):
            losses = []
            for images, labels in data.batches(config.batch_size, rng, hflip=config.hflip):
                model.zero_grad()
                loss = step(images, labels)
                losses.append(_finite_loss(loss, f"{label} 第 {epoch} 轮"))
                backward(loss)
                optimizer.step(poly_lr(config.base_lr, iteration, max_iter, config.poly_power))
                iteration += 1
                logger.debug(f"{label} iter {iteration}/{max_iter} loss={losses[-1]:.5f}")
            record = EpochRecord(epoch, float(np.mean(losses)), evaluate())
        logger.info(f"{label} epoch {epoch}/{config.epochs}: loss={record.loss:.5f}, "
                    f"metric={record.metric}")
        history.append(record)
    model.zero_grad()
    return history


def train_task(model: Backbone, task: str, data: MultiTaskDataset, config: TrainConfig,
               evaluate_every_epoch: bool = True) -> List[EpochRecord]:
    """
    训练单个任务, 只更新 trainable_parameters(task, 注册模式) 中的参数
    :return: 每轮的 (epoch, 平均损失, 评估指标)
    """
    entry = model.registry.get(task)
    spec = entry.spec
    targets = data.labels_for(spec.label)
    if len(targets) != len(data):
        raise ValueError(f"标签 {spec.label} 数量与图像不符")

    names = sorted(trainable_parameters(model, task, entry.mode))
    named = model.named_parameters()
    params = [named[name] for name in names]
    logger.info(f"训练任务 {task} ({entry.mode.value}): 可训练张量 {len(params)} 个, "
                f"{sum(p.size for p in params)} 个参数")

    def step(images, labels):
        return task_loss(model.predict(images, task, 'train'), spec, labels[spec.label])

    def evaluate():
        return evaluate_task(model, task, data) if evaluate_every_epoch else None

    return _optimize(model, params, data, config, step, evaluate, f"任务 {task}")


def pretrain(model: Backbone, data: MultiTaskDataset, config: TrainConfig,
             num_classes: int = 3) -> List[EpochRecord]:
    """
    分类代理预训练: 训练共享基础路径 (含基础 BN) 与预训练分类头
    因子化骨干在这里直接学到 kxk 滤波器组与 1x1 混合
    """
    if len(model.registry):
        raise TaskError(f"注册任务后不能再预训练共享参数: {model.registry.ids()}")
    if model.kind != 'plain':
        raise ValueError(f"只能预训练普通骨干, 当前为 {model.kind}")
    labels_all = data.labels_for(PRETRAIN_LABEL)
    if model.pretrain_head is None:
        model.add_pretrain_head(num_classes)
    params = [p for p in model.task_parameters(None).values() if p.trainable]

    def step(images, labels):
        return ops.softmax_cross_entropy(model.classify(images, 'train'), labels[PRETRAIN_LABEL])

    def evaluate():
        logits = _predict_all(model, data.images, lambda x: model.classify(x, 'eval'))
        return task_metrics(logits.argmax(axis=1), labels_all, MetricKind.ACCURACY)

    return _optimize(model, params, data, config, step, evaluate, "预训练")


def _predict_all(model: Backbone, images: np.ndarray, fn: Callable[[np.ndarray], Tensor],
                 batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    outputs = [fn(images[start:start + batch_size]).data
               for start in range(0, len(images), batch_size)]
    return np.concatenate(outputs, axis=0)


def decode_prediction(pred: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """把任务头输出解码成指标的输入"""
    if spec.loss == LossKind.CROSS_ENTROPY:
        return pred.argmax(axis=1)
    if spec.loss == LossKind.WEIGHTED_BCE:
        prob = 1.0 / (1.0 + np.exp(-pred[:, 0].astype(np.float64)))
        if spec.metric == MetricKind.F1_EDGE:
            return prob
        return (prob >= 0.5).astype(np.int64)
    if pred.shape[1] > 1:
        return normalize_directions(Tensor(pred)).data
    return pred[:, 0]


def evaluate_task(model: Backbone, task: str, data: MultiTaskDataset,
                  batch_size: int = EVAL_BATCH_SIZE) -> float:
    """eval 模式下在整个数据集上计算任务指标"""
    spec = model.registry.get(task).spec
    labels = data.labels_for(spec.label)
    pred = _predict_all(model, data.images, lambda x: model.predict(x, task, 'eval'), batch_size)
    if spec.head == HeadKind.CLASSIFIER:
        return task_metrics(pred.argmax(axis=1), labels, spec.metric)
    return task_metrics(decode_prediction(pred, spec), labels, spec.metric)
