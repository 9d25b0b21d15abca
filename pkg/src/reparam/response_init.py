"""
响应初始化 (RI): 用预训练卷积层 BN 前响应的协方差特征向量, 把 W^m 拆成

    W_s = Uᵀ W^m        (冻结的共享滤波器组)
    W_t = U             (各任务调制器的初始值)

满秩时 U Uᵀ = I, 重参数化后的前向与原模型一致; 截断到秩 r 时
常数项 b = ȳ - U Uᵀ ȳ 折进后面 BN 的滑动均值.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from ..layers.backbone import Backbone
from ..layers.conv import ConvBlock
from ..layers.rcm import RCMConvLayer
from ..linalg import ResponseMatrix, center_responses, response_eig
from ..utils.errors import ShapeError, TaskError
from ..utils.logger import get_logger, log_duration

logger = get_logger(__name__)

DEFAULT_MIN_SAMPLES = 4096
DEFAULT_OVERSAMPLING = 16

Rank = Optional[Union[int, Dict[str, int]]]


@dataclass
class ProbeSet:
    """
    采集响应用的探针输入
    :param images: [N, C, H, W]
    :param locations_per_sample: 每张图采样的空间位置数, None 表示在全部位置上均匀采样
    :param seed: 位置采样种子
    """
    images: np.ndarray
    locations_per_sample: Optional[int] = None
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ShapeError(f"探针输入应为非空的 [N, C, H, W], 实际 {self.images.shape}")


def default_sample_count(c_out: int, min_samples: int = DEFAULT_MIN_SAMPLES,
                         oversampling: int = DEFAULT_OVERSAMPLING) -> int:
    return max(oversampling * c_out, min_samples)


def _layer_responses(model: Backbone, layer_name: str, probe: ProbeSet) -> np.ndarray:
    """整个探针集上该层的 BN 前响应 [N, c_out, H', W'] (eval 前向, 不改动模型)"""
    key = f"{layer_name}:pre"
    chunks = []
    for start in range(0, len(probe.images), probe.batch_size):
        taps: Dict[str, np.ndarray] = {}
        model.forward(probe.images[start:start + probe.batch_size], None, 'eval', taps)
        chunks.append(taps[key].astype(np.float64))
    return np.concatenate(chunks, axis=0)


def collect_responses(model: Backbone, layer_name: str, probe: ProbeSet,
                      n: Optional[int] = None, min_samples: int = DEFAULT_MIN_SAMPLES,
                      oversampling: int = DEFAULT_OVERSAMPLING) -> ResponseMatrix:
    """
    在探针图像与空间位置上均匀采样 n 个 BN 前响应向量, 去均值后返回
    :param n: 样本数, 默认 max(16·c_out, 4096); locations_per_sample 给定时为 N·locations
    """
    layer = model.layer(layer_name)
    c_out = layer.c_out
    responses = _layer_responses(model, layer_name, probe)
    count, _, height, width = responses.shape
    # 每列一个位置: [c_out, N*H'*W'], 列按 (图像, 行, 列) 排序
    flat = responses.transpose(1, 0, 2, 3).reshape(c_out, -1)
    total = flat.shape[1]

    # 每层独立的采样流, 只取决于 (种子, 层序号)
    rng = np.random.default_rng([probe.seed, model.layer_index(layer_name)])
    if probe.locations_per_sample is not None:
        per_image = probe.locations_per_sample
        offsets = np.stack([rng.choice(height * width, size=per_image,
                                       replace=per_image > height * width)
                            for _ in range(count)])
        columns = (np.arange(count)[:, None] * height * width + offsets).reshape(-1)
    else:
        n = default_sample_count(c_out, min_samples, oversampling) if n is None else n
        if n < c_out:
            raise ValueError(f"{layer_name}: 响应样本数 {n} 少于通道数 {c_out}")
        columns = rng.choice(total, size=n, replace=n > total)
    if len(columns) < c_out:
        raise ValueError(f"{layer_name}: 响应样本数 {len(columns)} 少于通道数 {c_out}")

    logger.debug(f"{layer_name}: 从 {total} 个位置采样 {len(columns)} 个响应")
    return center_responses(flat[:, columns])


def _rank_for(rank: Rank, name: str, c_out: int) -> int:
    if rank is None:
        return c_out
    value = rank.get(name, c_out) if isinstance(rank, dict) else rank
    if not 1 <= value <= c_out:
        raise ValueError(f"{name}: 秩 {value} 超出范围 [1, {c_out}]")
    return int(value)


def _require_plain(model: Backbone) -> None:
    if model.kind != 'plain':
        raise ValueError(f"只能分解普通骨干, 当前为 {model.kind}")
    if len(model.registry):
        raise TaskError(f"分解前不能已注册任务: {model.registry.ids()}")


def response_initialize(model: Backbone, probe: ProbeSet, rank: Rank = None,
                        n: Optional[int] = None, min_samples: int = DEFAULT_MIN_SAMPLES,
                        oversampling: int = DEFAULT_OVERSAMPLING) -> Backbone:
    """
    把预训练的普通骨干转成 RCM 骨干, 原模型不变
    所有层的响应都从原模型采集; 之后注册的任务以 U 作为调制器初值
    :param rank: 保留的主成分数, 整数或 {层名: 秩}, 默认满秩
    """
    _require_plain(model)
    factors = {}
    with log_duration(logger, "响应初始化"):
        for name in model.layer_names():
            block = model.layer(name)
            responses = collect_responses(model, name, probe, n, min_samples, oversampling)
            pair = response_eig(responses)
            r = _rank_for(rank, name, block.c_out)
            U = pair.U[:, :r]
            weight = block.composite_weight()
            conv_bias = block.composite_bias()
            projector = U @ U.T
            offset = responses.mean - projector @ responses.mean

            w_mat = weight.reshape(block.c_out, -1)
            residual = np.abs(projector @ w_mat - w_mat).max() / max(np.abs(w_mat).max(), 1e-30)
            logger.info(f"{name}: 秩 {r}/{block.c_out}, 相对重建误差 {residual:.2e}, "
                        f"|b|max={np.abs(offset).max():.2e}")
            factors[name] = {
                'shared': (U.T @ w_mat).reshape(r, block.c_in, block.kernel, block.kernel),
                'basis': U,
                'bias': projector @ conv_bias,
                'offset': offset,
            }

    def build(_, block: ConvBlock) -> RCMConvLayer:
        f = factors[block.name]
        layer = RCMConvLayer(block.name, f['shared'], f['basis'], f['bias'],
                             stride=block.stride, padding=block.padding,
                             activation=block.activation, nff=model.spec.nff,
                             norms=block.norms, dtype=block.dtype)
        if np.any(f['offset'] != 0):
            # 截断丢掉的常数项并入后续 BN: BN(y + b) 等于把滑动均值减去 b
            layer.norms.shift_running_mean(-f['offset'])
        return layer

    converted = model.convert('rcm', build)
    converted.ranks = {name: int(f['basis'].shape[1]) for name, f in factors.items()}
    return converted


def identity_conversion(model: Backbone) -> Backbone:
    """不做 RI 的 RCM: W_s = W^m, 调制器从单位阵开始"""
    _require_plain(model)

    def build(_, block: ConvBlock) -> RCMConvLayer:
        return RCMConvLayer(block.name, block.composite_weight(), np.eye(block.c_out),
                            block.composite_bias(), stride=block.stride, padding=block.padding,
                            activation=block.activation, nff=model.spec.nff,
                            norms=block.norms, dtype=block.dtype)

    converted = model.convert('rcm', build)
    converted.ranks = {layer.name: layer.c_out for layer in converted.layers}
    return converted


def factored_conversion(model: Backbone) -> Backbone:
    """直接预训练的因子化骨干: kxk 部分即共享滤波器组, 1x1 混合即调制器初值"""
    _require_plain(model)
    if not model.spec.factored:
        raise ValueError("骨干不是因子化结构 (factored=false), 请使用 response_initialize")

    def build(_, block: ConvBlock) -> RCMConvLayer:
        return RCMConvLayer(block.name, block.weight.data, block.mix.data, block.composite_bias(),
                            stride=block.stride, padding=block.padding,
                            activation=block.activation, nff=model.spec.nff,
                            norms=block.norms, dtype=block.dtype)

    converted = model.convert('rcm', build)
    converted.ranks = {layer.name: layer.c_out for layer in converted.layers}
    return converted


def fold_nff(layer: RCMConvLayer, task: str, apply: bool = False) -> np.ndarray:
    """
    部署折叠: 返回 w = g · v / ‖v‖ (按行)
    :param apply: 为 True 时把该任务的调制器原地换成折叠后的 w
    """
    if not layer.nff:
        raise ValueError(f"{layer.name} 未启用 NFF")
    if task not in layer.modulators:
        raise TaskError(f"层 {layer.name} 上未注册任务: {task}")
    modulator = layer.modulators[task]
    folded = modulator.folded()
    if apply:
        modulator.fold()
    return folded
