from .registry import KIND_MODES, register_task, trainable_parameters
from .losses import task_loss
from .trainer import EpochRecord, evaluate_task, pretrain, train_task
from .accounting import parameter_count

__all__ = [
    'KIND_MODES', 'register_task', 'trainable_parameters', 'task_loss', 'EpochRecord',
    'evaluate_task', 'pretrain', 'train_task', 'parameter_count',
]
