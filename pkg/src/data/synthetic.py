"""
确定性的合成多任务场景

每张图放 1~3 个圆/正方形/三角形, 几何按整数栅格化, 标签全部由几何导出:
semseg(类别) parts(上下两半) edge(语义边界) normals(指向最近区域边界的单位向量)
saliency(前景) depth(按尺寸排序的远近) class_label(最大形状的类别).
噪声只加在图像上.
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ..models.specs import SceneConfig
from ..utils.logger import get_logger

logger = get_logger(__name__)

MIN_IMAGE_SIZE = 16
CLASS_IDS = {'circle': 1, 'square': 2, 'triangle': 3}
NUM_SEMSEG_CLASSES = len(CLASS_IDS) + 1
# 各类别的基础颜色 (RGB)
CLASS_COLORS = {
    'circle': (0.9, 0.2, 0.2),
    'square': (0.2, 0.8, 0.3),
    'triangle': (0.2, 0.3, 0.9),
}
LABEL_NAMES = ('edge', 'semseg', 'parts', 'normals', 'saliency', 'depth', 'class_label')
# 水平翻转时需要翻转宽度轴的标签
_SPATIAL = ('edge', 'semseg', 'parts', 'normals', 'saliency', 'depth')


@dataclass
class MultiTaskSample:
    image: np.ndarray        # [3, H, W] float32
    semseg: np.ndarray       # [H, W] int64, 0 为背景
    parts: np.ndarray        # [H, W] int64, 0 背景 / 1 上半 / 2 下半
    edge: np.ndarray         # [H, W] uint8
    normals: np.ndarray      # [2, H, W] float32, (x, y), 背景为 0
    saliency: np.ndarray     # [H, W] uint8
    depth: np.ndarray        # [H, W] float32, 背景 1.0
    class_label: int

    def label(self, name: str) -> np.ndarray:
        if name not in LABEL_NAMES:
            raise ValueError(f"未知的标签: {name}")
        return np.asarray(getattr(self, name))


def shape_mask(kind: str, cy: int, cx: int, size: int, height: int, width: int) -> np.ndarray:
    """整数坐标下的形状掩码"""
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    if kind == 'circle':
        return dy * dy + dx * dx <= size * size
    if kind == 'square':
        return (np.abs(dy) <= size) & (np.abs(dx) <= size)
    if kind == 'triangle':
        # 顶点朝上的等腰三角形, 底边在 cy + size
        return (dy >= -size) & (dy <= size) & (2 * np.abs(dx) <= dy + size)
    raise ValueError(f"未知的形状: {kind}")


def boundary_map(semseg: np.ndarray) -> np.ndarray:
    """4 邻域内存在不同语义标签的像素即为边界 (边界两侧都标记)"""
    edge = np.zeros(semseg.shape, dtype=bool)
    vertical = semseg[1:, :] != semseg[:-1, :]
    horizontal = semseg[:, 1:] != semseg[:, :-1]
    edge[1:, :] |= vertical
    edge[:-1, :] |= vertical
    edge[:, 1:] |= horizontal
    edge[:, :-1] |= horizontal
    return edge.astype(np.uint8)


def boundary_normals(instances: np.ndarray) -> np.ndarray:
    """每个前景像素指向其所属区域外最近像素的单位向量, 通道顺序 (x, y)"""
    height, width = instances.shape
    normals = np.zeros((2, height, width), dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    for instance in np.unique(instances):
        if instance == 0:
            continue
        mask = instances == instance
        _, (ny, nx) = ndimage.distance_transform_edt(mask, return_indices=True)
        dy = (ny - yy)[mask].astype(np.float64)
        dx = (nx - xx)[mask].astype(np.float64)
        norm = np.sqrt(dx * dx + dy * dy)
        normals[0][mask] = dx / norm
        normals[1][mask] = dy / norm
    return normals.astype(np.float32)


def render_sample(config: SceneConfig, index: int) -> MultiTaskSample:
    """按 (种子, 样本序号) 生成单个样本, 与生成顺序和总数无关"""
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    count = int(rng.integers(config.shapes_min, config.shapes_max + 1))
    min_size = max(3, size // 10)
    max_size = max(min_size, size // 4)

    shapes = []
    for _ in range(count):
        kind = config.shape_classes[int(rng.integers(len(config.shape_classes)))]
        radius = int(rng.integers(min_size, max_size + 1))
        cy = int(rng.integers(radius, size - radius))
        cx = int(rng.integers(radius, size - radius))
        brightness = float(rng.uniform(0.7, 1.0))
        shapes.append((radius, kind, cy, cx, brightness))
    # 从小到大绘制, 大的在最上层, 也离相机最近
    shapes.sort(key=lambda item: item[0])

    background = float(rng.uniform(0.0, 0.3))
    image = np.full((3, size, size), background, dtype=np.float64)
    semseg = np.zeros((size, size), dtype=np.int64)
    parts = np.zeros((size, size), dtype=np.int64)
    instances = np.zeros((size, size), dtype=np.int64)
    depth = np.ones((size, size), dtype=np.float64)
    rows = np.arange(size)[:, None]
    for order, (radius, kind, cy, cx, brightness) in enumerate(shapes):
        mask = shape_mask(kind, cy, cx, radius, size, size)
        semseg[mask] = CLASS_IDS[kind]
        parts[mask] = np.where(rows < cy, 1, 2).repeat(size, axis=1)[mask]
        instances[mask] = order + 1
        depth[mask] = 1.0 - (order + 1) / (count + 1)
        for channel, value in enumerate(CLASS_COLORS[kind]):
            image[channel][mask] = value * brightness

    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)

    return MultiTaskSample(
        image=image.astype(np.float32),
        semseg=semseg,
        parts=parts,
        edge=boundary_map(semseg),
        normals=boundary_normals(instances),
        saliency=(semseg > 0).astype(np.uint8),
        depth=depth.astype(np.float32),
        class_label=CLASS_IDS[shapes[-1][1]] - 1,
    )


def generate_dataset(config: SceneConfig, count: int) -> List[MultiTaskSample]:
    """
    生成合成数据集
    :param config: 场景配置
    :param count: 样本数
    :return: 样本列表, 同一 (config, seed) 结果逐位一致
    """
    if count < 1:
        raise ValueError(f"样本数必须 >= 1, 实际 {count}")
    if config.image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"图像尺寸 {config.image_size} 小于下限 {MIN_IMAGE_SIZE}")
    samples = [render_sample(config, index) for index in range(count)]
    logger.info(f"生成合成样本 {count} 个, 尺寸 {config.image_size}, 种子 {config.seed}")
    return samples


class MultiTaskDataset:
    """
    按标签名组织的批量数组
    :param images: [N, 3, H, W]
    :param labels: 标签名 -> [N, ...]
    """

    def __init__(self, images: np.ndarray, labels: Dict[str, np.ndarray],
                 config: Optional[SceneConfig] = None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = {name: np.asarray(value) for name, value in labels.items()}
        self.config = config
        for name, value in self.labels.items():
            if len(value) != len(self.images):
                raise ValueError(f"标签 {name} 数量 {len(value)} 与图像数 {len(self.images)} 不符")

    @classmethod
    def from_samples(cls, samples: Sequence[MultiTaskSample],
                     config: Optional[SceneConfig] = None) -> 'MultiTaskDataset':
        images = np.stack([s.image for s in samples])
        labels = {name: np.stack([s.label(name) for s in samples]) for name in LABEL_NAMES}
        return cls(images, labels, config)

    def __len__(self) -> int:
        return len(self.images)

    def labels_for(self, name: str) -> np.ndarray:
        if name not in self.labels:
            raise ValueError(f"数据集中没有标签 {name}, 已有: {sorted(self.labels)}")
        return self.labels[name]

    def subset(self, indices: Sequence[int]) -> 'MultiTaskDataset':
        indices = np.asarray(indices)
        return MultiTaskDataset(self.images[indices],
                                {name: value[indices] for name, value in self.labels.items()},
                                self.config)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                hflip: bool = False) -> Iterator[Tuple[np.ndarray, Dict[str, np.ndarray]]]:
        """
        按批迭代; 给出 rng 时打乱顺序, hflip 时每个样本以 0.5 概率水平翻转
        """
        order = np.arange(len(self))
        if rng is not None:
            order = rng.permutation(order)
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            images = self.images[index]
            labels = {name: value[index] for name, value in self.labels.items()}
            if hflip and rng is not None:
                flip = rng.random(len(index)) < 0.5
                if np.any(flip):
                    images, labels = flip_horizontal(images, labels, flip)
            yield images, labels


def flip_horizontal(images: np.ndarray, labels: Dict[str, np.ndarray],
                    which: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """翻转被选中的样本; 法向的 x 分量取反"""
    images = images.copy()
    images[which] = images[which][..., ::-1]
    flipped = {}
    for name, value in labels.items():
        value = value.copy()
        if name in _SPATIAL:
            value[which] = value[which][..., ::-1]
        if name == 'normals':
            value[which, 0] = -value[which, 0]
        flipped[name] = value
    return images, flipped
