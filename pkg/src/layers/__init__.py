from .base import Module, Taps
from .norm import NormBank
from .conv import ConvBlock
from .rcm import Modulator, RCMConvLayer, nff_effective_weight
from .adapter import AdapterLayer
from .heads import ClassifierHead, DenseHead
from .backbone import Backbone

__all__ = [
    'Module', 'Taps', 'NormBank', 'ConvBlock', 'Modulator', 'RCMConvLayer',
    'nff_effective_weight', 'AdapterLayer', 'ClassifierHead', 'DenseHead', 'Backbone',
]
