"""
参数量统计 (不含任务头): total = shared + P · per_task

每层 (K = k²·c_in·c_out, BN = 2·c_out):
    freeze       共享 K + BN
    bn-only      共享 K;           每任务 BN
    conv-only    共享 BN;          每任务 K
    single       每任务 K + BN
    rcm          共享 k²·c_in·r;   每任务 c_out·r + 偏置 c_out + BN (+ NFF 尺度 c_out)
    series-ra    共享 K;           每任务 c_out² + BN
    parallel-ra  共享 K;           每任务 c_in·c_out + BN
卷积偏置 (stage.bias) 跟随卷积核的归属.
"""
from typing import Dict, Optional

from ..models.specs import AdaptationMode, BackboneSpec, LayerCount, ParameterCount
from ..utils.logger import get_logger

logger = get_logger(__name__)


def _layer_count(name: str, k: int, c_in: int, c_out: int, bias: bool, mode: AdaptationMode,
                 nff: bool, rank: int) -> LayerCount:
    kernel = k * k * c_in * c_out
    conv_bias = c_out if bias else 0
    bn = 2 * c_out
    row = dict(name=name, k=k, c_in=c_in, c_out=c_out, shared_weights=0, shared_bias=0,
               shared_bn=0, task_weights=0, task_bn=0, task_bias=0, task_scale=0)

    if mode == AdaptationMode.FREEZE_ENCODER:
        row.update(shared_weights=kernel, shared_bias=conv_bias, shared_bn=bn)
    elif mode == AdaptationMode.TASK_SPECIFIC_BN:
        row.update(shared_weights=kernel, shared_bias=conv_bias, task_bn=bn)
    elif mode == AdaptationMode.TASK_SPECIFIC_CONV:
        row.update(shared_bn=bn, task_weights=kernel, task_bias=conv_bias)
    elif mode == AdaptationMode.SINGLE_TASK:
        row.update(task_weights=kernel, task_bias=conv_bias, task_bn=bn)
    elif mode == AdaptationMode.RCM:
        row.update(shared_weights=k * k * c_in * rank, task_weights=c_out * rank,
                   task_bias=c_out, task_bn=bn, task_scale=c_out if nff else 0)
    elif mode == AdaptationMode.SERIES_RA:
        row.update(shared_weights=kernel, shared_bias=conv_bias, task_weights=c_out * c_out,
                   task_bn=bn)
    elif mode == AdaptationMode.PARALLEL_RA:
        row.update(shared_weights=kernel, shared_bias=conv_bias, task_weights=c_in * c_out,
                   task_bn=bn)
    else:
        raise ValueError(f"未知的适配模式: {mode}")
    return LayerCount(**row)


def parameter_count(spec: BackboneSpec, tasks: int, mode: AdaptationMode,
                    nff: Optional[bool] = None,
                    ranks: Optional[Dict[str, int]] = None) -> ParameterCount:
    """
    :param spec: 骨干结构
    :param tasks: 任务数 P
    :param mode: 适配模式
    :param nff: RCM 是否计入 NFF 尺度 g, 默认取 spec.nff
    :param ranks: RCM 截断秩 {层名: r}, 默认满秩
    """
    if tasks < 1:
        raise ValueError(f"任务数必须 >= 1, 实际 {tasks}")
    mode = AdaptationMode(mode)
    nff = spec.nff if nff is None else nff
    ranks = ranks or {}

    layers = []
    for name, stage, shape in zip(spec.layer_names(), spec.stages, spec.layer_shapes()):
        layers.append(_layer_count(name, shape['k'], shape['c_in'], shape['c_out'], stage.bias,
                                   mode, nff, ranks.get(name, shape['c_out'])))

    shared = sum(layer.shared for layer in layers)
    per_task = sum(layer.per_task for layer in layers)
    weights_shared = sum(layer.shared_weights for layer in layers)
    weights_per_task = sum(layer.task_weights for layer in layers)
    result = ParameterCount(
        mode=mode, tasks=tasks, shared=shared, per_task=per_task,
        total=shared + tasks * per_task, weights_shared=weights_shared,
        weights_per_task=weights_per_task, weights_total=weights_shared + tasks * weights_per_task,
        layers=layers)
    logger.debug(f"参数量 {mode.value} x{tasks}: shared={shared}, per_task={per_task}")
    return result
