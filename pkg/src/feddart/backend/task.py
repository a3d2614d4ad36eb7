from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING, Iterable

from feddart.core import TaskKind, TaskSpec, hardware_matches

if TYPE_CHECKING:
    from feddart.backend.devices import DeviceSingle


class RejectionReason(str, Enum):
    UNKNOWN_DEVICE = "UNKNOWN_DEVICE"
    NOT_INITIALIZED = "NOT_INITIALIZED"
    CONSTRAINT_UNMET = "CONSTRAINT_UNMET"
    DUPLICATE_NAME = "DUPLICATE_NAME"
    BAD_REQUEST = "BAD_REQUEST"


class TaskRejected(Exception):
    def __init__(self, reason: RejectionReason, message: str = "") -> None:
        self.reason = reason
        self.message = message
        super().__init__(f"{reason.value}: {message}" if message else reason.value)


class Task:
    """A task as the backend sees it: the spec plus its constraint check."""

    def __init__(self, spec: TaskSpec) -> None:
        self.spec = spec

    @property
    def task_name(self) -> str:
        return self.spec.task_name

    @property
    def device_names(self) -> list[str]:
        return self.spec.device_names

    def check_constraints(
        self,
        devices: Iterable[DeviceSingle],
        *,
        init_required: bool,
        known_task_names: Iterable[str] = (),
    ) -> RejectionReason | None:
        """Reason the task cannot run on ``devices``, or None if it can."""
        try:
            self.spec.validate()
        except ValueError:
            return RejectionReason.BAD_REQUEST
        if self.task_name in set(known_task_names):
            return RejectionReason.DUPLICATE_NAME
        if self.spec.task_kind is TaskKind.INIT:
            return None
        by_name = {d.name: d for d in devices}
        for name in self.device_names:
            device = by_name.get(name)
            if device is None:
                return RejectionReason.UNKNOWN_DEVICE
            if init_required and not device.initialized:
                return RejectionReason.NOT_INITIALIZED
            if not hardware_matches(self.spec.hardware_requirements, device.hardware_config):
                return RejectionReason.CONSTRAINT_UNMET
        return None
