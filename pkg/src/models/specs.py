import enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class AdaptationMode(str, enum.Enum):
    """任务适配模式, 取值即 CLI 上的 --mode 名称"""
    FREEZE_ENCODER = 'freeze'
    TASK_SPECIFIC_BN = 'bn-only'
    TASK_SPECIFIC_CONV = 'conv-only'
    SINGLE_TASK = 'single'
    RCM = 'rcm'
    SERIES_RA = 'series-ra'
    PARALLEL_RA = 'parallel-ra'


class HeadKind(str, enum.Enum):
    DENSE = 'dense'
    CLASSIFIER = 'classifier'


class LossKind(str, enum.Enum):
    WEIGHTED_BCE = 'weighted-bce'
    CROSS_ENTROPY = 'cross-entropy'
    L1 = 'l1'


class MetricKind(str, enum.Enum):
    MIOU = 'miou'
    MEAN_ERR = 'mean_err'
    RMSE = 'rmse'
    F1_EDGE = 'f1_edge'
    ACCURACY = 'accuracy'


class Direction(str, enum.Enum):
    HIGHER_BETTER = 'higher'
    LOWER_BETTER = 'lower'

    @property
    def l_flag(self) -> int:
        """越低越好为1, 越高越好为0"""
        return 1 if self is Direction.LOWER_BETTER else 0


class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid', use_enum_values=False)


class StageSpec(_Strict):
    """骨干网络中的一个卷积层"""
    width: int = Field(..., gt=0)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: Optional[int] = Field(None, ge=0)
    bias: bool = False
    activation: str = 'relu'

    @field_validator('activation')
    @classmethod
    def _check_activation(cls, value: str) -> str:
        if value not in ('relu', 'none'):
            raise ValueError(f"不支持的激活函数: {value}")
        return value

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


class BackboneSpec(_Strict):
    """桌面规模的可配置 CNN 骨干"""
    in_channels: int = Field(3, gt=0)
    stages: List[StageSpec] = Field(..., min_length=1)
    nff: bool = True
    factored: bool = False
    mode: AdaptationMode = AdaptationMode.RCM

    @property
    def total_stride(self) -> int:
        stride = 1
        for stage in self.stages:
            stride *= stage.stride
        return stride

    def layer_names(self) -> List[str]:
        return [f"layer{i}" for i in range(len(self.stages))]

    def layer_shapes(self) -> List[Dict[str, int]]:
        """每层的 (k, c_in, c_out)"""
        shapes = []
        c_in = self.in_channels
        for stage in self.stages:
            shapes.append({'k': stage.kernel, 'c_in': c_in, 'c_out': stage.width})
            c_in = stage.width
        return shapes


# 各标签的默认任务配置; 损失权重沿用原多任务配方 (边缘 BCE x50 且正负像素 0.95/0.05)
TASK_PRESETS: Dict[str, Dict[str, Any]] = {
    'edge': {'head': 'dense', 'out_channels': 1, 'loss': 'weighted-bce', 'loss_weight': 50.0,
             'pos_weight': 0.95, 'neg_weight': 0.05, 'metric': 'f1_edge', 'direction': 'higher'},
    'semseg': {'head': 'dense', 'out_channels': 4, 'loss': 'cross-entropy', 'loss_weight': 1.0,
               'metric': 'miou', 'direction': 'higher'},
    'parts': {'head': 'dense', 'out_channels': 3, 'loss': 'cross-entropy', 'loss_weight': 2.0,
              'metric': 'miou', 'direction': 'higher'},
    'normals': {'head': 'dense', 'out_channels': 2, 'loss': 'l1', 'loss_weight': 10.0,
                'metric': 'mean_err', 'direction': 'lower'},
    'saliency': {'head': 'dense', 'out_channels': 1, 'loss': 'weighted-bce', 'loss_weight': 5.0,
                 'pos_weight': 1.0, 'neg_weight': 1.0, 'metric': 'miou', 'direction': 'higher'},
    'depth': {'head': 'dense', 'out_channels': 1, 'loss': 'l1', 'loss_weight': 1.0,
              'metric': 'rmse', 'direction': 'lower'},
    'class_label': {'head': 'classifier', 'out_channels': 3, 'loss': 'cross-entropy',
                    'loss_weight': 1.0, 'metric': 'accuracy', 'direction': 'higher'},
}


class TaskSpec(_Strict):
    """
    单个任务的配置, 未给出的字段按 label 取 TASK_PRESETS 中的默认值
    """
    id: str = Field(..., min_length=1, pattern=r'^[A-Za-z0-9_\-]+$')
    label: str
    head: HeadKind
    out_channels: int = Field(..., gt=0)
    loss: LossKind
    loss_weight: float = Field(..., gt=0)
    pos_weight: float = Field(1.0, gt=0)
    neg_weight: float = Field(1.0, gt=0)
    metric: MetricKind
    direction: Direction

    @model_validator(mode='before')
    @classmethod
    def _fill_from_preset(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        label = data.get('label', data.get('id'))
        if label not in TASK_PRESETS:
            raise ValueError(f"未知的标签类型: {label}, 可选: {sorted(TASK_PRESETS)}")
        merged = dict(TASK_PRESETS[label])
        merged.update(data)
        merged['label'] = label
        return merged

    @classmethod
    def preset(cls, label: str, task_id: Optional[str] = None, **overrides) -> 'TaskSpec':
        """按标签名构造默认任务"""
        return cls(id=task_id or label, label=label, **overrides)


class TrainConfig(_Strict):
    """优化配方: SGD + 动量 + 权重衰减 + poly 学习率"""
    epochs: int = Field(20, gt=0)
    batch_size: int = Field(8, gt=0)
    base_lr: float = Field(0.005, ge=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    poly_power: float = Field(0.9, gt=0)
    seed: int = Field(0, ge=0)
    hflip: bool = False


class SceneConfig(_Strict):
    """合成多任务场景生成配置"""
    image_size: int = Field(64, gt=0)
    shape_classes: List[str] = Field(default_factory=lambda: ['circle', 'square', 'triangle'])
    shapes_min: int = Field(1, ge=1)
    shapes_max: int = Field(3, ge=1)
    noise_std: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check_ranges(self) -> 'SceneConfig':
        if self.shapes_max < self.shapes_min:
            raise ValueError("shapes_max 不能小于 shapes_min")
        unknown = set(self.shape_classes) - {'circle', 'square', 'triangle'}
        if unknown or not self.shape_classes:
            raise ValueError(f"不支持的形状类别: {sorted(unknown)}")
        return self


class RunManifest(_Strict):
    """每条命令在输出旁写下的运行清单"""
    command: str
    argv: List[str] = Field(default_factory=list)
    config_hash: str
    seed: Optional[int] = None
    git_describe: str = 'unknown'
    outputs: List[str] = Field(default_factory=list)
    started_at: str
    wall_clock: float = 0.0


class TaskDrop(_Strict):
    model: float
    baseline: float
    direction: Direction
    drop: float


class DropReport(_Strict):
    """平均逐任务性能下降 (百分比, 越低越好)"""
    per_task: Dict[str, TaskDrop]
    delta_m: float

    @model_validator(mode='after')
    def _check_mean(self) -> 'DropReport':
        drops = [entry.drop for entry in self.per_task.values()]
        if drops and abs(sum(drops) / len(drops) - self.delta_m) > 1e-9:
            raise ValueError("delta_m 必须等于逐任务下降的均值")
        return self


class EquivalenceReport(_Strict):
    per_layer: Dict[str, float]
    global_max: float
    tol: float
    passed: bool

    @model_validator(mode='after')
    def _check_max(self) -> 'EquivalenceReport':
        if self.per_layer and self.global_max != max(self.per_layer.values()):
            raise ValueError("global_max 必须等于各层最大值")
        return self


class LayerCount(_Strict):
    name: str
    k: int
    c_in: int
    c_out: int
    shared_weights: int
    shared_bias: int = 0
    shared_bn: int
    task_weights: int
    task_bn: int
    task_bias: int
    task_scale: int = 0

    @property
    def shared(self) -> int:
        return self.shared_weights + self.shared_bias + self.shared_bn

    @property
    def per_task(self) -> int:
        return self.task_weights + self.task_bn + self.task_bias + self.task_scale


class ParameterCount(_Strict):
    """参数量统计, total = shared + tasks * per_task"""
    mode: AdaptationMode
    tasks: int
    shared: int
    per_task: int
    total: int
    weights_shared: int
    weights_per_task: int
    weights_total: int
    layers: List[LayerCount]
