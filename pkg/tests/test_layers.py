import numpy as np
import pytest

from src.layers import AdapterLayer, Backbone, RCMConvLayer, nff_effective_weight
from src.layers.adapter import TOPOLOGIES
from src.models import AdaptationMode, BackboneSpec, StageSpec, TaskSpec
from src.tensor import Tensor, conv2d
from src.tensor.core import Parameter
from src.utils.errors import ShapeError, TaskError


def _rcm_layer(rng, c_in=3, c_out=4, nff=True, basis=None):
    shared = rng.normal(size=(c_out, c_in, 3, 3))
    basis = np.eye(c_out) if basis is None else basis
    return RCMConvLayer('layer0', shared, basis, stride=1, padding=1, nff=nff, dtype=np.float64)


def test_nff_effective_weight_examples():
    np.testing.assert_allclose(nff_effective_weight(np.array([3.0, 4.0]), 2.0).data, [1.2, 1.6])
    np.testing.assert_allclose(nff_effective_weight(np.array([3.0, 4.0]), 0.0).data, [0.0, 0.0])
    unit = np.array([0.6, 0.8])
    np.testing.assert_allclose(nff_effective_weight(unit, 1.0).data, unit)
    with pytest.raises(ValueError):
        nff_effective_weight(np.zeros(3), 1.0)


def test_nff_rows_have_norm_g(rng):
    v = rng.normal(size=(5, 4))
    g = rng.uniform(0.5, 2.0, size=5)
    w = nff_effective_weight(v, g).data
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), g)


def test_identity_modulator_equals_shared_conv(rng):
    layer = _rcm_layer(rng)
    layer.add_task('a', AdaptationMode.RCM, init='identity')
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
    expected = conv2d(x, layer.shared, None, 1, 1).data
    np.testing.assert_allclose(layer.forward_pre_bn(x, 'a').data, expected, atol=1e-12)


def test_orthogonal_init_has_unit_scales(rng):
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    layer = _rcm_layer(rng, basis=q)
    layer.add_task('a', AdaptationMode.RCM, init='orthogonal_U')
    np.testing.assert_allclose(layer.modulators['a'].g.data, np.ones(4), atol=1e-5)


def test_two_stage_forward_matches_composed_kernel(rng):
    """测试两段式前向与合成卷积核一致"""
    layer = _rcm_layer(rng)
    layer.add_task('a', AdaptationMode.RCM, init='given', rows=rng.normal(size=(4, 4)))
    layer.modulators['a'].bias.assign(rng.normal(size=4))
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
    composed = Parameter(layer.composed_weight('a'), name='composed', dtype=np.float64)
    expected = conv2d(x, composed, layer.modulators['a'].bias, 1, 1).data
    np.testing.assert_allclose(layer.forward_pre_bn(x, 'a').data, expected, atol=1e-10)


def test_rcm_task_errors(rng):
    layer = _rcm_layer(rng)
    layer.add_task('a', AdaptationMode.RCM)
    with pytest.raises(TaskError):
        layer.add_task('a', AdaptationMode.RCM)
    with pytest.raises(TaskError):
        layer.forward(Tensor(rng.normal(size=(1, 3, 4, 4))), 'missing')
    with pytest.raises(TaskError):
        layer.add_task('b', AdaptationMode.SINGLE_TASK)


def test_shared_bank_never_trainable(rng):
    layer = _rcm_layer(rng)
    layer.add_task('a', AdaptationMode.RCM)
    names = layer.trainable_names('a', AdaptationMode.RCM)
    assert 'layer0.shared' not in names
    assert {'layer0.mod.a.v', 'layer0.mod.a.g', 'layer0.mod.a.bias'} <= names
    with pytest.raises(ValueError):
        layer.shared.trainable = True


def test_adapter_zero_init_equals_base(rng):
    """测试零初始化适配器等价于原卷积"""
    weight = rng.normal(size=(4, 3, 3, 3))
    for topology in ('series', 'parallel'):
        layer = AdapterLayer('layer0', weight, topology=topology, padding=1, dtype=np.float64)
        layer.add_task('a', TOPOLOGIES[topology])
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), dtype=np.float64)
        np.testing.assert_allclose(layer.forward_pre_bn(x, 'a').data,
                                   layer.forward_pre_bn(x, None).data)


def test_series_adapter_hand_arithmetic():
    layer = AdapterLayer('layer0', np.eye(2).reshape(2, 2, 1, 1), topology='series', padding=0,
                         dtype=np.float64)
    layer.add_task('a', AdaptationMode.SERIES_RA)
    A = np.array([[1.0, 2.0], [0.0, -1.0]])
    layer.adapters['a'].assign(A.reshape(2, 2, 1, 1))
    x = np.array([3.0, 5.0])
    out = layer.forward_pre_bn(Tensor(x.reshape(1, 2, 1, 1), dtype=np.float64), 'a')
    np.testing.assert_allclose(out.data.reshape(-1), x + A @ x)


def test_parallel_adapter_with_zero_base(rng):
    layer = AdapterLayer('layer0', np.zeros((4, 3, 3, 3)), topology='parallel', stride=2,
                         padding=1, dtype=np.float64)
    layer.add_task('a', AdaptationMode.PARALLEL_RA)
    A = rng.normal(size=(4, 3, 1, 1))
    layer.adapters['a'].assign(A)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)), dtype=np.float64)
    expected = conv2d(x, Parameter(A, name='A', dtype=np.float64), None, 2, 0).data
    np.testing.assert_allclose(layer.forward_pre_bn(x, 'a').data, expected)


def test_parallel_adapter_requires_same_padding():
    with pytest.raises(ShapeError):
        AdapterLayer('layer0', np.zeros((4, 3, 3, 3)), topology='parallel', padding=0)


def test_registration_leaves_other_tasks_untouched(tiny_spec, rng):
    model = Backbone(tiny_spec, seed=3, dtype=np.float64)
    model.add_task(TaskSpec.preset('semseg'), AdaptationMode.SINGLE_TASK)
    x = rng.normal(size=(2, 3, 16, 16))
    before = model.predict(x, 'semseg').data.copy()
    model.add_task(TaskSpec.preset('edge'), AdaptationMode.SINGLE_TASK)
    np.testing.assert_array_equal(model.predict(x, 'semseg').data, before)
    with pytest.raises(TaskError):
        model.add_task(TaskSpec.preset('edge'), AdaptationMode.SINGLE_TASK)


def test_head_init_independent_of_registration_order(tiny_spec):
    first = Backbone(tiny_spec, seed=5)
    first.add_task(TaskSpec.preset('edge'), AdaptationMode.FREEZE_ENCODER)
    first.add_task(TaskSpec.preset('depth'), AdaptationMode.FREEZE_ENCODER)
    second = Backbone(tiny_spec, seed=5)
    second.add_task(TaskSpec.preset('depth'), AdaptationMode.FREEZE_ENCODER)
    second.add_task(TaskSpec.preset('edge'), AdaptationMode.FREEZE_ENCODER)
    np.testing.assert_array_equal(first.heads['edge'].weight.data,
                                  second.heads['edge'].weight.data)


def test_dense_head_restores_resolution(tiny_spec, rng):
    model = Backbone(tiny_spec, seed=0)
    model.add_task(TaskSpec.preset('parts'), AdaptationMode.FREEZE_ENCODER)
    out = model.predict(rng.normal(size=(2, 3, 16, 16)), 'parts')
    assert out.shape == (2, 3, 16, 16)


def test_conversion_requires_plain_backbone_without_tasks(tiny_spec):
    model = Backbone(tiny_spec)
    model.add_task(TaskSpec.preset('edge'), AdaptationMode.FREEZE_ENCODER)
    with pytest.raises(TaskError):
        model.to_adapters('series')
    adapters = Backbone(tiny_spec).to_adapters('parallel')
    with pytest.raises(ValueError):
        adapters.to_adapters('series')


def test_unknown_layer_name(tiny_spec):
    with pytest.raises(ValueError):
        Backbone(tiny_spec).layer('layer9')


def test_factored_block_composite_weight(rng):
    spec = BackboneSpec(in_channels=3, stages=[StageSpec(width=4)], factored=True)
    model = Backbone(spec, seed=1, dtype=np.float64)
    block = model.layer('layer0')
    x = Tensor(rng.normal(size=(1, 3, 5, 5)), dtype=np.float64)
    composite = Parameter(block.composite_weight(), name='w', dtype=np.float64)
    np.testing.assert_allclose(block.forward_pre_bn(x).data, conv2d(x, composite, None, 1, 1).data,
                               atol=1e-10)
