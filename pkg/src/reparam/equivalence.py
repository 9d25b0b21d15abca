from typing import Dict, Iterable, Optional, Union

import numpy as np

from ..layers.backbone import Backbone
from ..models.specs import EquivalenceReport
from ..utils.errors import ShapeError
from ..utils.logger import get_logger

logger = get_logger(__name__)

HEAD_KEY = 'head'

Inputs = Union[np.ndarray, Iterable[np.ndarray]]


def _batches(inputs: Inputs):
    if isinstance(inputs, np.ndarray):
        inputs = [inputs] if inputs.ndim == 4 else [inputs[None]]
    for batch in inputs:
        batch = np.asarray(batch)
        yield batch if batch.ndim == 4 else batch[None]


def _outputs(model: Backbone, batch: np.ndarray, task: Optional[str]) -> Dict[str, np.ndarray]:
    taps: Dict[str, np.ndarray] = {}
    if task is not None:
        out = model.predict(batch, task, 'eval', taps)
    else:
        features = model.forward(batch, None, 'eval', taps)
        out = model.pretrain_head.forward(features) if model.pretrain_head is not None else None
    result = {name: taps[name] for name in model.layer_names()}
    if out is not None:
        result[HEAD_KEY] = out.data
    return result


def verify_equivalence(model_a: Backbone, model_b: Backbone, task: Optional[str],
                       inputs: Inputs, tol: float = 1e-4) -> EquivalenceReport:
    """
    eval 模式下逐层比较两个模型的输出 (以及任务头输出)
    :param task: 任务名, None 比较共享基础路径 (有预训练头时也比较其输出)
    :return: 逐层最大绝对偏差, global_max < tol 时通过
    """
    if model_a.layer_names() != model_b.layer_names():
        raise ShapeError(f"两个模型的层不一致: {model_a.layer_names()} vs {model_b.layer_names()}")

    per_layer: Dict[str, float] = {}
    for batch in _batches(inputs):
        outs_a = _outputs(model_a, batch, task)
        outs_b = _outputs(model_b, batch, task)
        for name in outs_a:
            if name not in outs_b:
                continue
            a, b = outs_a[name], outs_b[name]
            if a.shape != b.shape:
                raise ShapeError(f"{name} 输出形状不一致: {a.shape} vs {b.shape}")
            deviation = float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max())
            per_layer[name] = max(per_layer.get(name, 0.0), deviation)
    if not per_layer:
        raise ValueError("没有可比较的输入")

    global_max = max(per_layer.values())
    report = EquivalenceReport(per_layer=per_layer, global_max=global_max, tol=tol,
                               passed=global_max < tol)
    logger.info(f"等价性校验 {'通过' if report.passed else '未通过'}: "
                f"最大偏差 {global_max:.3e} (阈值 {tol:g})")
    return report
