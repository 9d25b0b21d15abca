import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add repo root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data import generate_dataset  # noqa: E402
from src.data.synthetic import MultiTaskDataset  # noqa: E402
from src.layers import Backbone  # noqa: E402
from src.models import BackboneSpec, SceneConfig, StageSpec, TrainConfig  # noqa: E402
from src.tasks import pretrain  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """两层骨干: 4 通道, 然后 6 通道步长 2"""
    return BackboneSpec(in_channels=3, stages=[StageSpec(width=4), StageSpec(width=6, stride=2)])


@pytest.fixture
def tiny_scene():
    return SceneConfig(image_size=16, seed=0)


@pytest.fixture
def tiny_data(tiny_scene):
    return MultiTaskDataset.from_samples(generate_dataset(tiny_scene, 8), tiny_scene)


@pytest.fixture
def fast_train():
    return TrainConfig(epochs=2, batch_size=4, base_lr=0.01)


@pytest.fixture
def pretrained(tiny_spec, tiny_data):
    """float64 的预训练骨干, BN 滑动统计量已非平凡"""
    model = Backbone(tiny_spec, seed=0, dtype=np.float64)
    pretrain(model, tiny_data, TrainConfig(epochs=1, batch_size=4, base_lr=0.01))
    return model


@pytest.fixture
def app_config(tmp_path):
    """写一份小规模的运行配置, 日志落在临时目录"""
    path = tmp_path / 'app.yaml'
    path.write_text(
        "logging:\n"
        "  level: INFO\n"
        f"  file: {tmp_path / 'logs' / 'rcmkit.log'}\n"
        "  console: false\n"
        "runtime:\n"
        "  threads: 1\n"
        "  dtype: float64\n"
        "defaults:\n"
        "  probe:\n"
        "    min_samples: 64\n"
        "    oversampling: 4\n"
        "    batch_size: 8\n"
        "  train:\n"
        "    epochs: 1\n"
        "    batch_size: 4\n"
        "    base_lr: 0.01\n"
        "  rsa:\n"
        "    m: 4\n"
        "    batch_size: 4\n"
        "  verify:\n"
        "    tol: 0.0001\n"
        "    inputs: 4\n"
        "  ablation:\n"
        "    seeds: [0]\n"
        "    tasks: [edge, semseg]\n",
        encoding='utf-8')
    return path


@pytest.fixture
def write_json(tmp_path):
    def _write(name, payload):
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding='utf-8')
        return path
    return _write
