import os

import numpy as np
import pytest

from src.data.synthetic import MultiTaskDataset
from src.layers import Backbone
from src.models import AdaptationMode, BackboneSpec, StageSpec, TaskSpec, TrainConfig
from src.reparam import identity_conversion
from src.tasks import (
    evaluate_task,
    parameter_count,
    register_task,
    train_task,
    trainable_parameters,
)
from src.utils.errors import NonFiniteError, TaskError

PLAIN_MODES = [AdaptationMode.FREEZE_ENCODER, AdaptationMode.TASK_SPECIFIC_BN,
               AdaptationMode.TASK_SPECIFIC_CONV, AdaptationMode.SINGLE_TASK]


@pytest.fixture
def rcm_model(pretrained):
    return identity_conversion(pretrained)


def _task_snapshot(model, task):
    return {name: p.data.copy() for name, p in model.task_parameters(task).items()}


def test_trainable_sets_are_monotone(pretrained):
    register_task(pretrained, TaskSpec.preset('edge'), AdaptationMode.SINGLE_TASK)
    sets = {mode: trainable_parameters(pretrained, 'edge', mode) for mode in PLAIN_MODES}
    freeze = sets[AdaptationMode.FREEZE_ENCODER]
    assert freeze == {'heads.edge.weight', 'heads.edge.bias'}
    assert freeze < sets[AdaptationMode.TASK_SPECIFIC_BN] < sets[AdaptationMode.SINGLE_TASK]
    assert freeze < sets[AdaptationMode.TASK_SPECIFIC_CONV] < sets[AdaptationMode.SINGLE_TASK]
    bn_only = sets[AdaptationMode.TASK_SPECIFIC_BN] - freeze
    assert not any(name.endswith('.weight') for name in bn_only)


def test_single_trains_its_whole_path(pretrained):
    register_task(pretrained, TaskSpec.preset('semseg'), AdaptationMode.SINGLE_TASK)
    trainable = trainable_parameters(pretrained, 'semseg')
    assert trainable == set(pretrained.task_parameters('semseg'))


def test_rcm_trainable_excludes_shared_bank(rcm_model):
    register_task(rcm_model, TaskSpec.preset('edge'), AdaptationMode.RCM)
    trainable = trainable_parameters(rcm_model, 'edge')
    assert not any(name.endswith('.shared') for name in trainable)
    assert 'layer0.mod.edge.g' in trainable
    for name in trainable:
        assert rcm_model.named_parameters()[name].trainable


def test_register_rejects_wrong_kind_and_duplicates(pretrained, rcm_model):
    with pytest.raises(TaskError):
        register_task(pretrained, TaskSpec.preset('edge'), AdaptationMode.RCM)
    with pytest.raises(TaskError):
        register_task(rcm_model, TaskSpec.preset('edge'), AdaptationMode.SINGLE_TASK)
    register_task(rcm_model, TaskSpec.preset('edge'), AdaptationMode.RCM)
    with pytest.raises(TaskError):
        register_task(rcm_model, TaskSpec.preset('edge'), AdaptationMode.RCM)
    # 失败的注册不留痕迹
    assert rcm_model.registry.ids() == ['edge']


def test_parameter_count_single_wide_layer():
    spec = BackboneSpec(in_channels=64, stages=[StageSpec(width=64)])
    rcm = parameter_count(spec, 5, AdaptationMode.RCM)
    assert rcm.weights_shared == 36864
    assert rcm.weights_per_task == 4096
    assert rcm.weights_total == 57344
    single = parameter_count(spec, 5, AdaptationMode.SINGLE_TASK)
    assert single.weights_total == 184320
    assert single.weights_shared == 0
    freeze = parameter_count(spec, 5, AdaptationMode.FREEZE_ENCODER)
    assert freeze.per_task == 0
    assert freeze.total == 36864 + 128


@pytest.mark.parametrize("mode", list(AdaptationMode))
def test_parameter_count_affine_in_tasks(tiny_spec, mode):
    counts = [parameter_count(tiny_spec, p, mode) for p in (1, 2, 3)]
    assert counts[2].total - counts[1].total == counts[1].total - counts[0].total
    assert counts[0].total == counts[0].shared + counts[0].per_task


def test_parameter_count_truncated_rank(tiny_spec):
    full = parameter_count(tiny_spec, 2, AdaptationMode.RCM, nff=False)
    cut = parameter_count(tiny_spec, 2, AdaptationMode.RCM, nff=False, ranks={'layer1': 3})
    assert full.weights_shared - cut.weights_shared == 9 * 4 * 3
    assert full.weights_per_task - cut.weights_per_task == 6 * 3
    with pytest.raises(ValueError):
        parameter_count(tiny_spec, 0, AdaptationMode.RCM)


def test_zero_lr_freeze_changes_nothing(pretrained, tiny_data):
    register_task(pretrained, TaskSpec.preset('semseg'), AdaptationMode.FREEZE_ENCODER)
    digest = pretrained.state_digest()
    history = train_task(pretrained, 'semseg', tiny_data,
                         TrainConfig(epochs=3, batch_size=4, base_lr=0.0))
    assert pretrained.state_digest() == digest
    assert len(history) == 3
    assert history[-1].loss == pytest.approx(history[0].loss, rel=1e-6)


def test_training_new_task_leaves_old_task_bit_identical(rcm_model, tiny_data, fast_train, rng):
    """测试训练新任务时旧任务逐位不变"""
    register_task(rcm_model, TaskSpec.preset('semseg'), AdaptationMode.RCM)
    train_task(rcm_model, 'semseg', tiny_data, fast_train, evaluate_every_epoch=False)
    snapshot = _task_snapshot(rcm_model, 'semseg')
    x = rng.normal(size=(2, 3, 16, 16))
    before = rcm_model.predict(x, 'semseg').data.copy()
    metric = evaluate_task(rcm_model, 'semseg', tiny_data)

    register_task(rcm_model, TaskSpec.preset('edge'), AdaptationMode.RCM)
    train_task(rcm_model, 'edge', tiny_data, fast_train, evaluate_every_epoch=False)

    for name, value in _task_snapshot(rcm_model, 'semseg').items():
        np.testing.assert_array_equal(value, snapshot[name])
    np.testing.assert_array_equal(rcm_model.predict(x, 'semseg').data, before)
    assert evaluate_task(rcm_model, 'semseg', tiny_data) == metric


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_operation_sequences_preserve_isolation(pretrained, tiny_data, seed):
    """测试随机操作序列下的任务隔离"""
    model = identity_conversion(pretrained)
    register_task(model, TaskSpec.preset('semseg'), AdaptationMode.RCM)
    x = np.random.default_rng(seed).normal(size=(2, 3, 16, 16))
    reference = model.predict(x, 'semseg').data.copy()

    rng = np.random.default_rng(seed)
    pending = ['edge', 'saliency', 'depth', 'normals']
    registered = []
    config = TrainConfig(epochs=1, batch_size=4, base_lr=0.05, seed=seed)
    for _ in range(5):
        if pending and (not registered or rng.random() < 0.5):
            label = pending.pop(int(rng.integers(len(pending))))
            register_task(model, TaskSpec.preset(label), AdaptationMode.RCM)
            registered.append(label)
        else:
            task = registered[int(rng.integers(len(registered)))]
            train_task(model, task, tiny_data, config, evaluate_every_epoch=False)
        np.testing.assert_array_equal(model.predict(x, 'semseg').data, reference)


ISOLATION_TASKS = ('semseg', 'edge', 'saliency')


def _isolation_sequence(pretrained, data, seed, steps=8):
    """
    随机执行注册/训练/评估, 每步之后所有未被该步操作的任务输出逐位不变
    """
    rng = np.random.default_rng(seed)
    model = identity_conversion(pretrained)
    x = rng.normal(size=(2, 3, 16, 16))
    config = TrainConfig(epochs=1, batch_size=4, base_lr=0.05, seed=seed)
    outputs = {}
    metrics = {}
    for _ in range(steps):
        pending = [task for task in ISOLATION_TASKS if task not in outputs]
        op = rng.choice(['register', 'train', 'eval']) if outputs else 'register'
        if op == 'register' and not pending:
            op = 'train'
        if op == 'register':
            target = pending[int(rng.integers(len(pending)))]
            register_task(model, TaskSpec.preset(target), AdaptationMode.RCM)
        else:
            target = sorted(outputs)[int(rng.integers(len(outputs)))]
            if op == 'train':
                train_task(model, target, data, config, evaluate_every_epoch=False)
            else:
                metric = evaluate_task(model, target, data)
                if target in metrics:
                    assert metric == metrics[target]

        for task, before in outputs.items():
            if task != target or op == 'eval':
                np.testing.assert_array_equal(model.predict(x, task).data, before)
        outputs[target] = model.predict(x, target).data.copy()
        if op != 'eval':
            metrics.pop(target, None)
        else:
            metrics[target] = metric


def test_isolation_over_many_random_sequences(pretrained, tiny_data):
    """测试 50 条随机操作序列下三个任务互不影响"""
    for seed in range(50):
        _isolation_sequence(pretrained, tiny_data, seed)


def test_shared_bn_untouched_by_freeze_training(pretrained, tiny_data, fast_train):
    register_task(pretrained, TaskSpec.preset('edge'), AdaptationMode.FREEZE_ENCODER)
    base = dict(pretrained.named_buffers())
    train_task(pretrained, 'edge', tiny_data, fast_train, evaluate_every_epoch=False)
    for name, value in pretrained.named_buffers().items():
        np.testing.assert_array_equal(value, base[name])


def test_nan_label_raises(pretrained, tiny_data, fast_train):
    labels = dict(tiny_data.labels)
    depth = labels['depth'].astype(np.float64).copy()
    depth.flat[0] = np.nan
    labels['depth'] = depth
    data = MultiTaskDataset(tiny_data.images, labels, tiny_data.config)
    register_task(pretrained, TaskSpec.preset('depth'), AdaptationMode.FREEZE_ENCODER)
    with pytest.raises(NonFiniteError):
        train_task(pretrained, 'depth', data, fast_train)


def test_unknown_task(pretrained, tiny_data, fast_train):
    with pytest.raises(TaskError):
        train_task(pretrained, 'missing', tiny_data, fast_train)


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get('RCM_SLOW') != '1', reason="设置 RCM_SLOW=1 运行")
def test_rcm_training_reduces_loss(tiny_spec, tiny_scene):
    from src.data import generate_dataset

    data = MultiTaskDataset.from_samples(generate_dataset(tiny_scene, 32), tiny_scene)
    model = identity_conversion(Backbone(tiny_spec, seed=0, dtype=np.float64))
    register_task(model, TaskSpec.preset('semseg'), AdaptationMode.RCM)
    history = train_task(model, 'semseg', data,
                         TrainConfig(epochs=10, batch_size=8, base_lr=0.05),
                         evaluate_every_epoch=False)
    assert history[-1].loss < history[0].loss


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get('RCM_SLOW') != '1', reason="设置 RCM_SLOW=1 运行")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_task_training_reduces_loss(tiny_spec, tiny_scene, seed):
    """测试单任务全量微调在多个种子下损失下降"""
    from src.data import generate_dataset

    data = MultiTaskDataset.from_samples(generate_dataset(tiny_scene, 32), tiny_scene)
    model = Backbone(tiny_spec, seed=seed, dtype=np.float64)
    register_task(model, TaskSpec.preset('semseg'), AdaptationMode.SINGLE_TASK)
    history = train_task(model, 'semseg', data,
                         TrainConfig(epochs=10, batch_size=8, base_lr=0.05, seed=seed),
                         evaluate_every_epoch=False)
    assert history[-1].loss < history[0].loss
