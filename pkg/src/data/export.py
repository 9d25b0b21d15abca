"""
数据集导出/导入: 目录下每个样本一个 .npz, 外加 manifest.json
{format_version, seed, config, count, labels}
"""
import json
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ..models.specs import SceneConfig
from ..utils.logger import get_logger
from .synthetic import LABEL_NAMES, MultiTaskDataset, MultiTaskSample

logger = get_logger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'


def sample_filename(index: int) -> str:
    return f"sample_{index:05d}.npz"


def save_dataset(samples: Sequence[MultiTaskSample], directory: Union[str, Path],
                 config: SceneConfig, force: bool = False) -> Path:
    """
    写出数据集目录
    :param force: 目录已有清单时是否覆盖
    :return: 清单路径
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise FileExistsError(f"数据集已存在: {directory} (使用 --force 覆盖)")
    directory.mkdir(parents=True, exist_ok=True)

    for index, sample in enumerate(samples):
        arrays = {'image': sample.image}
        arrays.update({name: sample.label(name) for name in LABEL_NAMES})
        np.savez(directory / sample_filename(index), **arrays)

    manifest = {
        'format_version': DATASET_FORMAT_VERSION,
        'seed': config.seed,
        'config': config.model_dump(mode='json'),
        'count': len(samples),
        'labels': list(LABEL_NAMES),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + '\n',
                             encoding='utf-8')
    logger.info(f"数据集已写出: {directory} ({len(samples)} 个样本)")
    return manifest_path


def load_dataset(directory: Union[str, Path]) -> MultiTaskDataset:
    """读取 save_dataset 写出的目录"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"找不到数据集清单: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    if manifest.get('format_version') != DATASET_FORMAT_VERSION:
        raise ValueError(f"数据集格式版本不支持: {manifest.get('format_version')}")

    config = SceneConfig.model_validate(manifest['config'])
    labels = manifest.get('labels', list(LABEL_NAMES))
    images, columns = [], {name: [] for name in labels}
    for index in range(manifest['count']):
        with np.load(directory / sample_filename(index)) as blob:
            images.append(blob['image'])
            for name in labels:
                columns[name].append(blob[name])
    dataset = MultiTaskDataset(np.stack(images),
                               {name: np.stack(values) for name, values in columns.items()},
                               config)
    logger.debug(f"读取数据集 {directory}: {len(dataset)} 个样本")
    return dataset
