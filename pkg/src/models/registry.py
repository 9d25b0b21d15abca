from typing import Dict, Iterator, List

from ..utils.errors import TaskError
from .specs import AdaptationMode, TaskSpec


class TaskEntry:
    """已注册任务: 任务配置与适配模式"""

    def __init__(self, spec: TaskSpec, mode: AdaptationMode):
        self.spec = spec
        self.mode = AdaptationMode(mode)

    @property
    def id(self) -> str:
        return self.spec.id

    def to_dict(self) -> dict:
        return {'spec': self.spec.model_dump(mode='json'), 'mode': self.mode.value}

    @classmethod
    def from_dict(cls, data: dict) -> 'TaskEntry':
        return cls(TaskSpec.model_validate(data['spec']), AdaptationMode(data['mode']))

    def __repr__(self) -> str:
        return f"TaskEntry({self.id}, mode={self.mode.value})"


class TaskRegistry:
    """任务字典, 保持注册顺序 (检查点按此顺序重放注册)"""

    def __init__(self):
        self._entries: Dict[str, TaskEntry] = {}

    def add(self, entry: TaskEntry) -> None:
        if entry.id in self._entries:
            raise TaskError(f"任务已注册: {entry.id}")
        self._entries[entry.id] = entry

    def get(self, task: str) -> TaskEntry:
        if task not in self._entries:
            raise TaskError(f"未注册的任务: {task}, 已有: {self.ids()}")
        return self._entries[task]

    def mode_of(self, task: str) -> AdaptationMode:
        return self.get(task).mode

    def ids(self) -> List[str]:
        return list(self._entries)

    def to_list(self) -> List[dict]:
        return [entry.to_dict() for entry in self._entries.values()]

    def __contains__(self, task: str) -> bool:
        return task in self._entries

    def __iter__(self) -> Iterator[TaskEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)
