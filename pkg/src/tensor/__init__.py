from .core import DEFAULT_DTYPE, FrozenParameter, OpNode, Parameter, Tensor, backward, zero_grad
from .ops import BatchNormState, batchnorm, conv2d
from .optim import SGD, poly_lr, sgd_step
from .gradcheck import gradcheck

__all__ = [
    'DEFAULT_DTYPE', 'FrozenParameter', 'OpNode', 'Parameter', 'Tensor', 'backward', 'zero_grad',
    'BatchNormState', 'batchnorm', 'conv2d', 'SGD', 'poly_lr', 'sgd_step', 'gradcheck',
]
