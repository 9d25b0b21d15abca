import os

import numpy as np
import pytest

from src.layers import Backbone, RCMConvLayer, nff_effective_weight
from src.layers.norm import BN_EPS
from src.linalg import response_eig
from src.models import AdaptationMode, BackboneSpec, StageSpec, TaskSpec, TrainConfig
from src.reparam import (
    ProbeSet,
    collect_responses,
    factored_conversion,
    fold_nff,
    identity_conversion,
    response_initialize,
    verify_equivalence,
)
from src.tasks import pretrain
from src.tensor import BatchNormState, Tensor, batchnorm
from src.utils.errors import TaskError

SMALL = dict(min_samples=64, oversampling=4)


@pytest.fixture
def probe(tiny_data):
    return ProbeSet(tiny_data.images, seed=0, batch_size=4)


def test_full_rank_ri_is_equivalent(pretrained, probe, rng):
    """测试满秩响应初始化的等价性"""
    converted = response_initialize(pretrained, probe, **SMALL)
    assert converted.kind == 'rcm'
    assert pretrained.kind == 'plain'
    report = verify_equivalence(pretrained, converted, None, rng.normal(size=(3, 3, 16, 16)))
    assert report.passed, report.per_layer
    assert set(report.per_layer) == {'layer0', 'layer1', 'head'}
    for layer in converted.layers:
        np.testing.assert_allclose(layer.basis.T @ layer.basis, np.eye(layer.c_out), atol=1e-10)


def test_orthogonal_u_task_starts_at_base(pretrained, probe, rng):
    converted = response_initialize(pretrained, probe, **SMALL)
    converted.add_task(TaskSpec.preset('edge'), AdaptationMode.RCM, init='orthogonal_U')
    x = rng.normal(size=(2, 3, 16, 16))
    np.testing.assert_allclose(converted.forward(x, 'edge').data, converted.forward(x, None).data,
                               atol=1e-10)


def test_conversion_leaves_source_untouched(pretrained, probe):
    before = pretrained.state_digest()
    response_initialize(pretrained, probe, rank=2, **SMALL)
    assert pretrained.state_digest() == before


def test_collect_responses_shape_and_determinism(pretrained, probe):
    first = collect_responses(pretrained, 'layer1', probe, n=50)
    second = collect_responses(pretrained, 'layer1', probe, n=50)
    assert first.Y.shape == (6, 50)
    np.testing.assert_array_equal(first.Y, second.Y)
    np.testing.assert_allclose(first.Y.mean(axis=1), 0.0, atol=1e-10)
    with pytest.raises(ValueError):
        collect_responses(pretrained, 'layer1', probe, n=5)


def test_collect_responses_locations_per_sample(pretrained, tiny_data):
    probe = ProbeSet(tiny_data.images, locations_per_sample=3, seed=1)
    assert collect_responses(pretrained, 'layer0', probe).Y.shape == (4, len(tiny_data) * 3)


def test_constant_probe_gives_zero_responses():
    spec = BackboneSpec(in_channels=3, stages=[StageSpec(width=4, padding=0)])
    model = Backbone(spec, seed=0, dtype=np.float64)
    probe = ProbeSet(np.full((2, 3, 8, 8), 0.7))
    responses = collect_responses(model, 'layer0', probe, n=20)
    np.testing.assert_allclose(responses.Y, 0.0, atol=1e-12)


def test_truncated_rank_folds_offset_into_bn(pretrained, probe, rng):
    """测试截断秩时常数项折进 BN"""
    converted = response_initialize(pretrained, probe, rank=2, **SMALL)
    assert converted.ranks['layer0'] == 2
    responses = collect_responses(pretrained, 'layer0', probe, **SMALL)
    U = response_eig(responses).U[:, :2]
    projector = U @ U.T
    mean = responses.mean

    x = rng.normal(size=(2, 3, 16, 16))
    taps_orig, taps_conv = {}, {}
    pretrained.forward(x, None, 'eval', taps_orig)
    converted.forward(x, None, 'eval', taps_conv)
    y = taps_orig['layer0:pre']
    np.testing.assert_allclose(taps_conv['layer0:pre'],
                               np.einsum('oc,nchw->nohw', projector, y), atol=1e-10)

    projected = mean[None, :, None, None] + np.einsum(
        'oc,nchw->nohw', projector, y - mean[None, :, None, None])
    original_bn = pretrained.layer('layer0').norms.base
    expected = np.maximum(batchnorm(Tensor(projected, dtype=np.float64), original_bn,
                                    mode='eval', eps=BN_EPS).data, 0.0)
    np.testing.assert_allclose(taps_conv['layer0'], expected, atol=1e-8)


def test_rank_out_of_range(pretrained, probe):
    with pytest.raises(ValueError):
        response_initialize(pretrained, probe, rank=0, **SMALL)
    with pytest.raises(ValueError):
        response_initialize(pretrained, probe, rank={'layer1': 7}, **SMALL)


def test_conversion_rejects_registered_tasks(pretrained, probe):
    pretrained.add_task(TaskSpec.preset('edge'), AdaptationMode.FREEZE_ENCODER)
    with pytest.raises(TaskError):
        response_initialize(pretrained, probe, **SMALL)


def test_fold_nff(pretrained, probe, rng):
    converted = response_initialize(pretrained, probe, **SMALL)
    converted.add_task(TaskSpec.preset('edge'), AdaptationMode.RCM)
    layer = converted.layer('layer0')
    modulator = layer.modulators['edge']
    modulator.v.assign(rng.normal(size=modulator.v.shape))
    modulator.g.assign(np.ones(layer.c_out))
    x = rng.normal(size=(2, 3, 16, 16))
    before = converted.predict(x, 'edge').data

    folded = fold_nff(layer, 'edge')
    np.testing.assert_allclose(folded, nff_effective_weight(modulator.v.data, modulator.g.data).data)
    np.testing.assert_allclose(np.linalg.norm(folded, axis=1), 1.0)

    applied = fold_nff(layer, 'edge', apply=True)
    assert not layer.modulators['edge'].nff
    np.testing.assert_allclose(fold_nff(layer, 'edge'), applied)
    np.testing.assert_allclose(converted.predict(x, 'edge').data, before, atol=1e-10)
    with pytest.raises(TaskError):
        fold_nff(layer, 'semseg')


def test_verify_self_and_perturbed(pretrained, rng):
    x = rng.normal(size=(2, 3, 16, 16))
    report = verify_equivalence(pretrained, pretrained.copy(), None, x)
    assert report.global_max == 0.0
    assert report.passed

    perturbed = pretrained.copy()
    weight = perturbed.layer('layer0').weight
    weight.assign(weight.data + 0.1)
    report = verify_equivalence(pretrained, perturbed, None, x, tol=1e-4)
    assert not report.passed
    assert report.per_layer['layer0'] > 1e-4


def test_identity_conversion_is_equivalent(pretrained, rng):
    converted = identity_conversion(pretrained)
    converted.add_task(TaskSpec.preset('edge'), AdaptationMode.RCM, init='identity')
    x = rng.normal(size=(2, 3, 16, 16))
    assert verify_equivalence(pretrained, converted, None, x, tol=1e-8).passed
    np.testing.assert_allclose(converted.forward(x, 'edge').data, pretrained.forward(x).data,
                               atol=1e-8)


def test_factored_conversion(rng):
    spec = BackboneSpec(in_channels=3, stages=[StageSpec(width=4), StageSpec(width=5, stride=2)],
                        factored=True)
    model = Backbone(spec, seed=2, dtype=np.float64)
    converted = factored_conversion(model)
    assert verify_equivalence(model, converted, None, rng.normal(size=(2, 3, 8, 8)),
                              tol=1e-8).passed
    plain = Backbone(BackboneSpec(in_channels=3, stages=[StageSpec(width=4)]))
    with pytest.raises(ValueError):
        factored_conversion(plain)


def test_bn_state_untouched_by_equivalence_check(pretrained, rng):
    before = pretrained.state_digest()
    verify_equivalence(pretrained, pretrained.copy(), None, rng.normal(size=(2, 3, 16, 16)))
    assert pretrained.state_digest() == before
    assert isinstance(pretrained.layer('layer0').norms.base, BatchNormState)


def test_nff_fold_matches_forward_on_random_layers(rng):
    """测试随机层上 NFF 折叠前后输出一致且行范数等于 |g|"""
    x = rng.normal(size=(1, 5, 6, 6))
    for _ in range(1000):
        c_in, c_out = (int(v) for v in rng.integers(1, 6, size=2))
        kernel = int(rng.choice([1, 3]))
        layer = RCMConvLayer('layer0', rng.normal(size=(c_out, c_in, kernel, kernel)),
                             np.eye(c_out), stride=1, padding=kernel // 2, nff=True,
                             dtype=np.float64)
        layer.add_task('t', AdaptationMode.RCM, init='identity')
        modulator = layer.modulators['t']
        modulator.v.assign(rng.normal(size=modulator.v.shape))
        g = rng.normal(size=c_out)
        modulator.g.assign(g)
        inputs = Tensor(x[:, :c_in], dtype=np.float64)
        before = layer.forward_pre_bn(inputs, 't').data.copy()

        folded = fold_nff(layer, 't', apply=True)
        np.testing.assert_allclose(np.linalg.norm(folded, axis=1), np.abs(g), atol=1e-6)
        np.testing.assert_allclose(layer.forward_pre_bn(inputs, 't').data, before, atol=1e-5)


def test_ri_ignores_input_order(pretrained, tiny_data):
    """测试打乱探针图像顺序后主成分只差符号"""
    shuffled = tiny_data.images[np.random.default_rng(7).permutation(len(tiny_data.images))]
    for name in pretrained.layer_names():
        taps = {}
        pretrained.forward(tiny_data.images[:1], None, 'eval', taps)
        _, _, height, width = taps[f"{name}:pre"].shape
        # 取满全部位置, 与顺序无关
        n = len(tiny_data.images) * height * width
        original = response_eig(collect_responses(
            pretrained, name, ProbeSet(tiny_data.images, seed=0), n=n))
        permuted = response_eig(collect_responses(
            pretrained, name, ProbeSet(shuffled, seed=0), n=n))
        np.testing.assert_allclose(permuted.S, original.S, rtol=1e-8, atol=1e-12)
        signs = np.sign(np.sum(original.U * permuted.U, axis=0))
        np.testing.assert_allclose(permuted.U * signs, original.U, atol=1e-6)


@pytest.mark.parametrize("truncated,untouched", [('layer1', 'layer0'), ('layer0', 'layer1')])
def test_ri_rank_choice_is_layer_local(pretrained, probe, truncated, untouched):
    """测试一层的秩选择不影响其他层的转换结果"""
    full = response_initialize(pretrained, probe, **SMALL).state_arrays()
    cut = response_initialize(pretrained, probe, rank={truncated: 2}, **SMALL).state_arrays()
    local = [name for name in full if name.startswith(f"{untouched}.")]
    assert local
    for name in local:
        np.testing.assert_array_equal(cut[name], full[name])
    assert any(cut[name].shape != full[name].shape
               for name in full if name.startswith(f"{truncated}."))


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get('RCM_SLOW') != '1', reason="设置 RCM_SLOW=1 运行")
def test_full_rank_ri_four_layers_float32(tiny_data):
    """测试 4 层 (最宽 64 通道) float32 骨干在 100 个输入上的等价性"""
    spec = BackboneSpec(in_channels=3, stages=[
        StageSpec(width=16), StageSpec(width=32, stride=2),
        StageSpec(width=64), StageSpec(width=64, stride=2)])
    model = Backbone(spec, seed=0)
    pretrain(model, tiny_data, TrainConfig(epochs=1, batch_size=4, base_lr=0.01))
    converted = response_initialize(model, ProbeSet(tiny_data.images, seed=0, batch_size=4))
    inputs = np.random.default_rng(5).random(size=(100, 3, 16, 16))
    report = verify_equivalence(model, converted, None, list(inputs.reshape(4, 25, 3, 16, 16)))
    assert report.passed, report.per_layer
    assert set(report.per_layer) == {'layer0', 'layer1', 'layer2', 'layer3', 'head'}
