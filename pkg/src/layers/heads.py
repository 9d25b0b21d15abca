from typing import Dict

import numpy as np

from ..tensor.core import Parameter, Tensor
from ..tensor.ops import add, conv2d, global_avg_pool, matmul, transpose, upsample_nearest
from .conv import he_normal


class DenseHead:
    """
    稠密预测头: 单个 1x1 卷积, 再按骨干总步长最近邻上采样回输入分辨率
    :param prefix: 参数名前缀, 形如 heads.<task>
    :param c_in: 骨干输出通道
    :param out_channels: 预测通道数
    :param upsample: 上采样倍数
    """

    def __init__(self, prefix: str, c_in: int, out_channels: int, upsample: int = 1,
                 rng: np.random.Generator = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.upsample = upsample
        self.weight = Parameter(he_normal(rng, (out_channels, c_in, 1, 1), c_in),
                                name=f"{prefix}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), name=f"{prefix}.bias", dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        return upsample_nearest(conv2d(features, self.weight, self.bias), self.upsample)

    def named_parameters(self) -> Dict[str, Parameter]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class ClassifierHead:
    """全局平均池化 + 线性层, 用于分类预训练"""

    def __init__(self, prefix: str, c_in: int, out_channels: int,
                 rng: np.random.Generator = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.weight = Parameter(he_normal(rng, (out_channels, c_in), c_in),
                                name=f"{prefix}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), name=f"{prefix}.bias", dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        pooled = global_avg_pool(features)
        return add(matmul(pooled, transpose(self.weight, (1, 0))), self.bias)

    def named_parameters(self) -> Dict[str, Parameter]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}
