from .registry import TaskEntry, TaskRegistry
from .specs import (
    AdaptationMode,
    BackboneSpec,
    Direction,
    DropReport,
    EquivalenceReport,
    HeadKind,
    LossKind,
    MetricKind,
    ParameterCount,
    RunManifest,
    SceneConfig,
    StageSpec,
    TaskSpec,
    TrainConfig,
    TASK_PRESETS,
)

__all__ = [
    'AdaptationMode', 'BackboneSpec', 'Direction', 'DropReport', 'EquivalenceReport',
    'HeadKind', 'LossKind', 'MetricKind', 'ParameterCount', 'RunManifest', 'SceneConfig',
    'StageSpec', 'TaskEntry', 'TaskRegistry', 'TaskSpec', 'TrainConfig', 'TASK_PRESETS',
]
