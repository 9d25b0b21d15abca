from .synthetic import (
    CLASS_IDS,
    LABEL_NAMES,
    MultiTaskDataset,
    MultiTaskSample,
    boundary_map,
    generate_dataset,
)
from .export import load_dataset, save_dataset
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint

__all__ = [
    'CLASS_IDS', 'LABEL_NAMES', 'MultiTaskDataset', 'MultiTaskSample', 'boundary_map',
    'generate_dataset', 'load_dataset', 'save_dataset', 'load_checkpoint', 'read_checkpoint',
    'save_checkpoint',
]
