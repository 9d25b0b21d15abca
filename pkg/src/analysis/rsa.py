"""
任务干扰的表征相似性分析 (RSA)

对每个任务, 在 m 个小批量上取共享权重的梯度; 样本两两之间的 1 - Pearson 组成
m×m 的表征不相似矩阵 (RDM). 两个任务 RDM 上三角的 Spearman 秩相关即二者的相关度.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata, spearmanr

from ..data.synthetic import MultiTaskDataset
from ..layers.backbone import Backbone
from ..tasks.losses import task_loss
from ..tensor.core import backward
from ..utils.errors import ShapeError
from ..utils.logger import get_logger

logger = get_logger(__name__)

Batch = Tuple[np.ndarray, dict]


@dataclass
class GradientSampleSet:
    """一个任务在一层共享权重上的 m 个梯度样本 [m, d]"""
    task: str
    layer: str
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 2:
            raise ShapeError(f"梯度样本应为 [m>=2, d], 实际 {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"任务 {self.task} 的梯度样本含非有限值")

    @property
    def m(self) -> int:
        return int(self.samples.shape[0])

    @property
    def d(self) -> int:
        return int(self.samples.shape[1])


@dataclass
class RSAMatrix:
    tasks: List[str]
    values: np.ndarray
    layer: str = ''
    meta: dict = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> Path:
        """写出 CSV, 任务顺序等信息写到同名 .json"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['task', *self.tasks])
            for task, row in zip(self.tasks, self.values):
                writer.writerow([task, *[f"{value:.6f}" for value in row]])
        sidecar = {'layer': self.layer, 'tasks': self.tasks, **self.meta}
        path.with_suffix('.json').write_text(json.dumps(sidecar, indent=2, ensure_ascii=False)
                                             + '\n', encoding='utf-8')
        return path


def shared_weight_name(model: Backbone, task: str, layer_name: str) -> str:
    """任务前向路径上该层的共享 (不可训练) 卷积权重名"""
    layer = model.layer(layer_name)
    candidates = [f"{layer_name}.shared", f"{layer_name}.weight"]
    path = layer.task_parameters(task)
    for name in candidates:
        if name in path:
            return name
    raise ValueError(f"任务 {task} 在层 {layer_name} 上没有共享权重 (私有卷积模式)")


def _minibatches(data: Union[MultiTaskDataset, Sequence[Batch]], m: int, batch_size: int,
                 seed: int) -> List[Batch]:
    if not isinstance(data, MultiTaskDataset):
        batches = list(data)
        if len(batches) < m:
            raise ValueError(f"需要 {m} 个小批量, 只提供了 {len(batches)} 个")
        return batches[:m]
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(m):
        index = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
        batches.append((data.images[index],
                        {name: value[index] for name, value in data.labels.items()}))
    return batches


def capture_task_gradients(model: Backbone, task: str, layer: str,
                           data: Union[MultiTaskDataset, Sequence[Batch]], m: int = 16,
                           batch_size: int = 16, seed: int = 0) -> GradientSampleSet:
    """
    在 m 个小批量上计算 (不应用) 任务损失对该层共享权重的梯度
    eval 前向, 不更新 BN 统计量; 已有的 grad 在结束后恢复
    """
    if m < 2:
        raise ValueError(f"m 必须 >= 2, 实际 {m}")
    spec = model.registry.get(task).spec
    name = shared_weight_name(model, task, layer)
    params = model.named_parameters()
    weight = params[name]
    saved = {key: param.grad for key, param in params.items()}
    digest = model.state_digest()

    rows = []
    try:
        for images, labels in _minibatches(data, m, batch_size, seed):
            model.zero_grad()
            if spec.label not in labels:
                raise ValueError(f"小批量中没有标签 {spec.label}")
            loss = task_loss(model.predict(images, task, 'eval'), spec, labels[spec.label])
            backward(loss)
            rows.append(weight.grad.astype(np.float64).reshape(-1).copy())
    finally:
        for key, param in params.items():
            param.grad = saved[key]
    if model.state_digest() != digest:
        raise RuntimeError("梯度采集改动了模型状态")
    logger.debug(f"任务 {task} 在 {layer} 上采集梯度 {len(rows)} x {weight.size}")
    return GradientSampleSet(task=task, layer=layer, samples=np.stack(rows))


def _rdm_vector(samples: np.ndarray, task: str, errors: List[str]) -> Optional[np.ndarray]:
    std = samples.std(axis=1)
    if np.any(std == 0):
        errors.append(f"{task}: 第 {np.flatnonzero(std == 0).tolist()} 个梯度样本方差为0")
        return None
    rdm = 1.0 - np.corrcoef(samples)
    upper = np.triu_indices(samples.shape[0], k=1)
    return rdm[upper]


def rsa_correlation(sets: Sequence[GradientSampleSet]) -> RSAMatrix:
    """
    任务两两之间 RDM 的 Spearman 相关; 对称, 对角为 1
    退化情形 (零方差) 逐对收集后统一报错
    """
    if not sets:
        raise ValueError("没有梯度样本")
    layers = {s.layer for s in sets}
    if len(layers) != 1:
        raise ValueError(f"梯度样本来自不同的层: {sorted(layers)}")
    shapes = {(s.m, s.d) for s in sets}
    if len(shapes) != 1:
        raise ShapeError(f"各任务的 (m, d) 不一致: {sorted(shapes)}")

    errors: List[str] = []
    vectors = [_rdm_vector(s.samples, s.task, errors) for s in sets]
    count = len(sets)
    values = np.eye(count)
    for i in range(count):
        for j in range(i + 1, count):
            a, b = vectors[i], vectors[j]
            if a is None or b is None:
                continue
            if np.ptp(a) == 0 or np.ptp(b) == 0:
                errors.append(f"({sets[i].task}, {sets[j].task}): RDM 上三角为常数, 秩相关无定义")
                continue
            if np.array_equal(rankdata(a), rankdata(b)):
                rho = 1.0
            else:
                rho = float(spearmanr(a, b)[0])
            values[i, j] = values[j, i] = rho
    if errors:
        raise ValueError("RSA 存在退化的任务对: " + "; ".join(errors))

    tasks = [s.task for s in sets]
    logger.info(f"RSA {sets[0].layer}: 任务 {tasks}, m={sets[0].m}, d={sets[0].d}")
    return RSAMatrix(tasks=tasks, values=values, layer=sets[0].layer,
                     meta={'m': sets[0].m, 'd': sets[0].d})
