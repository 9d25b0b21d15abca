"""
可配置的小型 CNN 骨干, 管理各层、任务头与任务注册表

骨干种类:
- plain: 普通卷积块 (支持 freeze / bn-only / conv-only / single)
- rcm: 重参数化卷积 (rcm)
- series / parallel: 残差适配器基线 (series-ra / parallel-ra)
"""
import copy
import hashlib
import zlib
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from ..models.registry import TaskEntry, TaskRegistry
from ..models.specs import AdaptationMode, BackboneSpec, HeadKind, TaskSpec
from ..tensor.core import Parameter, Tensor
from ..utils.errors import CheckpointError, TaskError
from ..utils.logger import get_logger
from .adapter import AdapterLayer
from .base import Module, Taps
from .conv import ConvBlock
from .heads import ClassifierHead, DenseHead
from .rcm import RCMConvLayer

logger = get_logger(__name__)

KINDS = ('plain', 'rcm', 'series', 'parallel')
PRETRAIN_HEAD = 'pretrain_head'

Head = Union[DenseHead, ClassifierHead]


class Backbone:
    """
    骨干网络
    :param spec: 结构配置
    :param seed: 初始化随机种子
    :param dtype: 参数精度
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.kind = 'plain'
        self.ranks: Dict[str, int] = {}
        self.registry = TaskRegistry()
        self.heads: Dict[str, Head] = {}
        self.pretrain_head: Optional[ClassifierHead] = None

        rng = np.random.default_rng(seed)
        self.layers: List[Module] = []
        for name, stage, shape in zip(spec.layer_names(), spec.stages, spec.layer_shapes()):
            self.layers.append(ConvBlock(
                name, shape['c_in'], shape['c_out'], kernel=stage.kernel, stride=stage.stride,
                padding=stage.pad, bias=stage.bias, activation=stage.activation,
                factored=spec.factored, rng=rng, dtype=self.dtype))

    # ------------------------------------------------------------ 结构

    @property
    def out_channels(self) -> int:
        return self.spec.stages[-1].width

    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> Module:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ValueError(f"未知的层: {name}, 可选: {self.layer_names()}")

    def layer_index(self, name: str) -> int:
        return self.layer_names().index(self.layer(name).name)

    def convert(self, kind: str, build: Callable[[int, Module], Module]) -> 'Backbone':
        """
        把普通骨干的每一层替换为新结构, 返回新模型, 原模型不变
        :param kind: 目标骨干种类
        :param build: (层序号, 原层) -> 新层
        """
        if kind not in KINDS:
            raise ValueError(f"未知的骨干种类: {kind}")
        if self.kind != 'plain':
            raise ValueError(f"只能转换普通骨干, 当前为 {self.kind}")
        if len(self.registry):
            raise TaskError(f"转换前不能已注册任务: {self.registry.ids()}")
        converted = self.copy()
        converted.layers = [build(i, layer) for i, layer in enumerate(converted.layers)]
        converted.kind = kind
        return converted

    def to_adapters(self, topology: str) -> 'Backbone':
        """转换为残差适配器骨干 (基础卷积冻结)"""
        return self.convert(topology, lambda _, block: AdapterLayer.from_block(block, topology))

    # ------------------------------------------------------------ 任务

    def _head_rng(self, task: str) -> np.random.Generator:
        # 每个任务头的初始化只取决于种子与任务名, 与注册顺序无关
        return np.random.default_rng([self.seed, zlib.crc32(task.encode('utf-8'))])

    def _build_head(self, prefix: str, spec: TaskSpec, rng: np.random.Generator) -> Head:
        if spec.head == HeadKind.CLASSIFIER:
            return ClassifierHead(prefix, self.out_channels, spec.out_channels, rng=rng,
                                  dtype=self.dtype)
        return DenseHead(prefix, self.out_channels, spec.out_channels,
                         upsample=self.spec.total_stride, rng=rng, dtype=self.dtype)

    def add_pretrain_head(self, num_classes: int) -> ClassifierHead:
        rng = self._head_rng(PRETRAIN_HEAD)
        self.pretrain_head = ClassifierHead(PRETRAIN_HEAD, self.out_channels, num_classes,
                                            rng=rng, dtype=self.dtype)
        return self.pretrain_head

    def add_task(self, spec: TaskSpec, mode: AdaptationMode, init: str = 'orthogonal_U',
                 rows: Optional[Dict[str, np.ndarray]] = None) -> None:
        """
        分配任务私有状态: 各层按模式分配私有参数, 再加任务头
        先对所有层做兼容性检查, 失败时模型保持不变
        :param rows: init=given 时每层的调制器初始行
        """
        mode = AdaptationMode(mode)
        if spec.id in self.registry:
            raise TaskError(f"任务已注册: {spec.id}")
        for layer in self.layers:
            layer.check_new_task(spec.id, mode)
        if init == 'given' and self.kind == 'rcm':
            missing = [name for name in self.layer_names() if name not in (rows or {})]
            if missing:
                raise ValueError(f"init=given 缺少这些层的调制器: {missing}")
        if init == 'identity' and self.kind == 'rcm':
            truncated = [layer.name for layer in self.layers if layer.rank != layer.c_out]
            if truncated:
                raise ValueError(f"这些层做了秩截断, 不能用单位阵初始化: {truncated}")

        if not len(self.registry):
            for layer in self.layers:
                layer.freeze_base()
            if self.pretrain_head is not None:
                for param in self.pretrain_head.named_parameters().values():
                    param.trainable = False

        for layer in self.layers:
            layer.add_task(spec.id, mode, init=init,
                           rows=(rows or {}).get(layer.name))
        self.heads[spec.id] = self._build_head(f"heads.{spec.id}", spec,
                                               self._head_rng(spec.id))
        self.registry.add(TaskEntry(spec, mode))

    def head_names(self, task: str) -> List[str]:
        self.registry.get(task)
        return list(self.heads[task].named_parameters())

    # ------------------------------------------------------------ 前向

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == self.dtype else x.astype(self.dtype)
        return Tensor(np.asarray(x), dtype=self.dtype)

    def forward(self, x, task: Optional[str] = None, mode: str = 'eval',
                taps: Taps = None) -> Tensor:
        """
        骨干前向
        :param task: 任务名, None 为共享的基础路径
        :param taps: 若给出, 记录每层 BN 前响应与输出
        """
        if task is not None:
            self.registry.get(task)
        out = self._as_input(x)
        for layer in self.layers:
            out = layer.forward(out, task, mode, taps)
        return out

    def predict(self, x, task: str, mode: str = 'eval', taps: Taps = None) -> Tensor:
        features = self.forward(x, task, mode, taps)
        return self.heads[task].forward(features)

    def classify(self, x, mode: str = 'eval') -> Tensor:
        if self.pretrain_head is None:
            raise ValueError("模型没有预训练分类头")
        return self.pretrain_head.forward(self.forward(x, None, mode))

    # ------------------------------------------------------------ 参数与状态

    def named_parameters(self) -> Dict[str, Parameter]:
        params: Dict[str, Parameter] = {}
        for layer in self.layers:
            params.update(layer.named_parameters())
        if self.pretrain_head is not None:
            params.update(self.pretrain_head.named_parameters())
        for task in self.registry.ids():
            params.update(self.heads[task].named_parameters())
        return params

    def named_buffers(self) -> Dict[str, np.ndarray]:
        buffers: Dict[str, np.ndarray] = {}
        for layer in self.layers:
            buffers.update(layer.named_buffers())
        return buffers

    def task_parameters(self, task: Optional[str]) -> Dict[str, Parameter]:
        """任务前向路径上的全部参数 (含共享参数)"""
        params: Dict[str, Parameter] = {}
        for layer in self.layers:
            params.update(layer.task_parameters(task))
        if task is None:
            if self.pretrain_head is not None:
                params.update(self.pretrain_head.named_parameters())
        else:
            params.update(self.heads[task].named_parameters())
        return params

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """参数与缓冲区 (BN 滑动统计量, RCM 基础路径), 不含优化器动量"""
        arrays = {name: param.data for name, param in self.named_parameters().items()}
        arrays.update(self.named_buffers())
        return arrays

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        if missing or extra:
            raise CheckpointError(f"状态条目与模型结构不符: 缺少 {missing[:5]}, 多余 {extra[:5]}")
        for name, param in params.items():
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise CheckpointError(f"{name} 形状不符: {value.shape} != {param.shape}")
            param.data = value.astype(param.dtype).copy()
        for name in buffers:
            layer = self.layer(name.split('.', 1)[0])
            layer.set_buffer(name, np.asarray(arrays[name]).copy())

    def state_digest(self) -> str:
        """参数与缓冲区的 sha256, 用于隔离性与无副作用检查"""
        digest = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            arr = np.ascontiguousarray(arr)
            digest.update(name.encode('utf-8'))
            digest.update(str(arr.dtype).encode('ascii'))
            digest.update(str(arr.shape).encode('ascii'))
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def copy(self) -> 'Backbone':
        return copy.deepcopy(self)

    # ------------------------------------------------------------ 元数据

    def folded_tasks(self) -> Dict[str, List[str]]:
        folded = {}
        for layer in self.layers:
            if isinstance(layer, RCMConvLayer):
                tasks = [t for t, mod in layer.modulators.items() if mod.nff != layer.nff]
                if tasks:
                    folded[layer.name] = tasks
        return folded

    def metadata(self) -> dict:
        """重建模型结构所需的全部信息 (数值在检查点里)"""
        return {
            'kind': self.kind,
            'spec': self.spec.model_dump(mode='json'),
            'seed': self.seed,
            'dtype': np.dtype(self.dtype).name,
            'ranks': dict(self.ranks),
            'folded': self.folded_tasks(),
            'pretrain_classes': (self.pretrain_head.weight.shape[0]
                                 if self.pretrain_head is not None else None),
            'tasks': self.registry.to_list(),
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> 'Backbone':
        """按元数据重放结构与任务注册, 数值随后由 load_state 覆盖"""
        spec = BackboneSpec.model_validate(meta['spec'])
        model = cls(spec, seed=meta.get('seed', 0), dtype=np.dtype(meta.get('dtype', 'float32')))
        if meta.get('pretrain_classes'):
            model.add_pretrain_head(meta['pretrain_classes'])

        kind = meta.get('kind', 'plain')
        if kind == 'rcm':
            ranks = meta.get('ranks', {})
            model = model.convert('rcm', lambda _, block: _rcm_skeleton(block, ranks, spec.nff))
            model.ranks = {name: int(rank) for name, rank in ranks.items()}
        elif kind in ('series', 'parallel'):
            model = model.to_adapters(kind)

        for item in meta.get('tasks', []):
            entry = TaskEntry.from_dict(item)
            if model.kind == 'rcm':
                rows = {layer.name: np.ones((layer.c_out, layer.rank)) for layer in model.layers}
                model.add_task(entry.spec, entry.mode, init='given', rows=rows)
            else:
                model.add_task(entry.spec, entry.mode)
        for layer_name, tasks in meta.get('folded', {}).items():
            layer = model.layer(layer_name)
            for task in tasks:
                layer.modulators[task].fold()
        return model

    def __str__(self) -> str:
        return (f"Backbone(kind={self.kind}, layers={len(self.layers)}, "
                f"tasks={self.registry.ids()})")


def _rcm_skeleton(block: ConvBlock, ranks: Dict[str, int], nff: bool) -> RCMConvLayer:
    rank = int(ranks.get(block.name, block.c_out))
    shared = np.zeros((rank, block.c_in, block.kernel, block.kernel))
    basis = np.zeros((block.c_out, rank))
    return RCMConvLayer(block.name, shared, basis, stride=block.stride, padding=block.padding,
                        activation=block.activation, nff=nff, norms=block.norms,
                        dtype=block.dtype)
