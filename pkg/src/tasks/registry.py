"""
增量任务注册与各适配模式下的可训练参数集合

| 模式         | 可训练                         |
|--------------|--------------------------------|
| freeze       | 任务头                         |
| bn-only      | 任务头 + 私有 BN               |
| conv-only    | 任务头 + 私有卷积              |
| single       | 任务头 + 私有卷积 + 私有 BN    |
| rcm          | 任务头 + 调制器 + 私有 BN      |
| series-ra    | 任务头 + 适配器 + 私有 BN      |
| parallel-ra  | 任务头 + 适配器 + 私有 BN      |
"""
from typing import Dict, Optional, Set

import numpy as np

from ..layers.backbone import Backbone
from ..models.specs import AdaptationMode, TaskSpec
from ..utils.errors import TaskError
from ..utils.logger import get_logger

logger = get_logger(__name__)

# 各骨干种类可用的适配模式
KIND_MODES = {
    'plain': {AdaptationMode.FREEZE_ENCODER, AdaptationMode.TASK_SPECIFIC_BN,
              AdaptationMode.TASK_SPECIFIC_CONV, AdaptationMode.SINGLE_TASK},
    'rcm': {AdaptationMode.RCM},
    'series': {AdaptationMode.SERIES_RA},
    'parallel': {AdaptationMode.PARALLEL_RA},
}


def register_task(model: Backbone, spec: TaskSpec, mode: AdaptationMode,
                  init: str = 'orthogonal_U',
                  rows: Optional[Dict[str, np.ndarray]] = None) -> None:
    """
    注册新任务: 分配任务头、BN 以及 (按模式) 调制器/适配器/私有卷积
    已有任务的参数与输出不受影响
    :param init: RCM 调制器初始化方式 identity / orthogonal_U / given
    """
    mode = AdaptationMode(mode)
    if mode not in KIND_MODES[model.kind]:
        raise TaskError(
            f"{model.kind} 骨干不支持 {mode.value} 模式, 可选: "
            f"{sorted(m.value for m in KIND_MODES[model.kind])}")
    before = len(model.named_parameters())
    model.add_task(spec, mode, init=init, rows=rows)
    added = len(model.named_parameters()) - before
    logger.info(f"注册任务 {spec.id} ({spec.label}), 模式 {mode.value}, 新增参数张量 {added} 个")


def trainable_parameters(model: Backbone, task: str,
                         mode: Optional[AdaptationMode] = None) -> Set[str]:
    """
    给定模式下该任务可训练的参数名集合 (按命名规则推出, 共享滤波器组永不在内)
    :param mode: 默认取任务注册时的模式
    """
    entry = model.registry.get(task)
    mode = entry.mode if mode is None else AdaptationMode(mode)
    names = set(model.head_names(task))
    for layer in model.layers:
        names |= layer.trainable_names(task, mode)
    return names
