from .metrics import delta_m, task_metrics
from .rsa import GradientSampleSet, RSAMatrix, capture_task_gradients, rsa_correlation

__all__ = ['delta_m', 'task_metrics', 'GradientSampleSet', 'RSAMatrix',
           'capture_task_gradients', 'rsa_correlation']
