"""Value types exchanged between the workflow side, the server and the workers.

Every type has a canonical JSON form (``to_json`` / ``from_json``) whose
field names are the snake_case attribute names. That encoding is used on the
wire and in every file the runtime writes.
"""

from __future__ import annotations

import hashlib
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

DEFAULT_MAX_PAYLOAD_BYTES = 64 * 1024 * 1024


def now_ms() -> int:
    return int(time.time() * 1000)


class SystemClock:
    """Wall clock in integer milliseconds since the Unix epoch."""

    def now(self) -> int:
        return now_ms()


class ManualClock:
    """Clock that only moves when told to. Used by tests and journal replay."""

    def __init__(self, start_ms: int = 0) -> None:
        self._now = start_ms
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def set(self, value_ms: int) -> None:
        with self._lock:
            self._now = value_ms

    def advance(self, seconds: float) -> int:
        with self._lock:
            self._now += int(round(seconds * 1000))
            return self._now


class TaskKind(str, Enum):
    INIT = "INIT"
    DEFAULT = "DEFAULT"


class TaskState(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    PARTIAL = "PARTIAL"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    STOPPED = "STOPPED"

    @property
    def terminal(self) -> bool:
        return self in (TaskState.COMPLETED, TaskState.FAILED, TaskState.STOPPED)


# Key under which an INIT task keeps the parameters broadcast to every device.
BROADCAST_KEY = "*"


def result_list_of(result_dict: Mapping[str, Any]) -> list[Any]:
    """Values of ``result_dict`` ordered by key."""
    return [result_dict[key] for key in sorted(result_dict)]


@dataclass(frozen=True)
class ParameterVector:
    values: tuple[float, ...]
    sample_count: int = 0
    shape: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.values)

    def to_json(self) -> dict[str, Any]:
        return {
            "values": list(self.values),
            "sample_count": self.sample_count,
            "shape": list(self.shape) if self.shape is not None else None,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ParameterVector:
        shape = data.get("shape")
        return cls(
            values=tuple(data["values"]),
            sample_count=int(data.get("sample_count", 0)),
            shape=tuple(shape) if shape is not None else None,
        )


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    execute_function: str
    per_device_params: Mapping[str, Mapping[str, Any]]
    task_kind: TaskKind = TaskKind.DEFAULT
    max_wait_seconds: float = 60.0
    # Required hardware_config entries; a device matches when every key is present and equal.
    hardware_requirements: Mapping[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.task_name:
            raise ValueError("task_name must be non-empty")
        if not self.execute_function:
            raise ValueError("execute_function must be non-empty")
        if not self.max_wait_seconds > 0:
            raise ValueError("max_wait_seconds must be positive")
        if self.task_kind is TaskKind.DEFAULT:
            if not self.per_device_params:
                raise ValueError("a default task must name at least one device")
            if BROADCAST_KEY in self.per_device_params:
                raise ValueError("broadcast parameters are only valid for init tasks")

    @property
    def device_names(self) -> list[str]:
        return [name for name in self.per_device_params if name != BROADCAST_KEY]

    def params_for(self, device_name: str) -> dict[str, Any]:
        if self.task_kind is TaskKind.INIT:
            params = self.per_device_params.get(device_name)
            if params is None:
                params = self.per_device_params.get(BROADCAST_KEY, {})
            return dict(params)
        return dict(self.per_device_params[device_name])

    def to_json(self) -> dict[str, Any]:
        return {
            "task_name": self.task_name,
            "execute_function": self.execute_function,
            "per_device_params": {k: dict(v) for k, v in self.per_device_params.items()},
            "task_kind": self.task_kind.value,
            "max_wait_seconds": self.max_wait_seconds,
            "hardware_requirements": dict(self.hardware_requirements),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> TaskSpec:
        # "file_path" from older clients is accepted and dropped.
        return cls(
            task_name=data["task_name"],
            execute_function=data["execute_function"],
            per_device_params={k: dict(v) for k, v in data["per_device_params"].items()},
            task_kind=TaskKind(data.get("task_kind", "DEFAULT")),
            max_wait_seconds=float(data.get("max_wait_seconds", 60.0)),
            hardware_requirements=dict(data.get("hardware_requirements") or {}),
        )


@dataclass(frozen=True)
class TaskResult:
    device_name: str
    duration_seconds: float
    result_dict: Mapping[str, Any]
    result_list: tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        if self.duration_seconds < 0:
            raise ValueError("duration_seconds must be non-negative")
        object.__setattr__(self, "result_list", tuple(result_list_of(self.result_dict)))

    @classmethod
    def build(cls, device_name: str, duration_seconds: float, result_dict: Mapping[str, Any]) -> TaskResult:
        return cls(device_name, max(0.0, duration_seconds), dict(result_dict))

    @property
    def failed(self) -> bool:
        return "error" in self.result_dict

    # camelCase accessors kept for workflow scripts written against the original API.
    @property
    def deviceName(self) -> str:  # noqa: N802
        return self.device_name

    @property
    def duration(self) -> float:
        return self.duration_seconds

    @property
    def resultDict(self) -> Mapping[str, Any]:  # noqa: N802
        return self.result_dict

    @property
    def resultList(self) -> list[Any]:  # noqa: N802
        return list(self.result_list)

    def to_json(self) -> dict[str, Any]:
        return {
            "device_name": self.device_name,
            "duration_seconds": self.duration_seconds,
            "result_dict": dict(self.result_dict),
            "result_list": list(self.result_list),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> TaskResult:
        return cls(
            device_name=data["device_name"],
            duration_seconds=float(data["duration_seconds"]),
            result_dict=dict(data["result_dict"]),
        )


@dataclass(frozen=True)
class TaskStatus:
    state: TaskState
    finished_devices: frozenset[str] = frozenset()
    pending_devices: frozenset[str] = frozenset()
    # Devices cut off by expiry; empty unless the task timed out.
    missing_devices: frozenset[str] = frozenset()

    def to_json(self) -> dict[str, Any]:
        return {
            "state": self.state.value,
            "finished_devices": sorted(self.finished_devices),
            "pending_devices": sorted(self.pending_devices),
            "missing_devices": sorted(self.missing_devices),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> TaskStatus:
        return cls(
            state=TaskState(data["state"]),
            finished_devices=frozenset(data.get("finished_devices", ())),
            pending_devices=frozenset(data.get("pending_devices", ())),
            missing_devices=frozenset(data.get("missing_devices", ())),
        )


def classify_status(
    finished: Iterable[str],
    pending: Iterable[str],
    *,
    queued: bool = False,
    stopped: bool = False,
    expired: bool = False,
) -> TaskState:
    """Derive a task's state from who has finished and who is still pending.

    An expired task has its pending set cleared by the caller, so it lands on
    COMPLETED when anything arrived and FAILED otherwise.
    """
    finished = set(finished)
    pending = set(pending)
    if stopped:
        return TaskState.STOPPED
    if queued:
        return TaskState.QUEUED
    if expired and not finished:
        return TaskState.FAILED
    if finished and not pending:
        return TaskState.COMPLETED
    if finished:
        return TaskState.PARTIAL
    return TaskState.RUNNING


@dataclass(frozen=True)
class Handle:
    task_name: str
    issued_at: int

    def to_json(self) -> dict[str, Any]:
        return {"task_name": self.task_name, "issued_at": self.issued_at}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Handle:
        return cls(task_name=data["task_name"], issued_at=int(data["issued_at"]))


@dataclass
class DeviceRecord:
    """Server- or backend-side view of one physical client.

    Mutated only by its owner (the server state or the backend selector);
    everything handed to other threads goes through ``to_json``.
    """

    name: str
    ip_address: str = ""
    port: int = 0
    hardware_config: dict[str, Any] | None = None
    open_tasks: dict[str, dict[str, Any]] = field(default_factory=dict)
    finished_tasks: dict[str, TaskResult] = field(default_factory=dict)
    initialized: bool = False
    last_seen: int = 0

    def open_task(self, task_name: str, params: Mapping[str, Any]) -> None:
        if task_name in self.finished_tasks:
            raise ValueError(f"task {task_name!r} already finished on {self.name!r}")
        self.open_tasks[task_name] = dict(params)

    def finish_task(self, task_name: str, result: TaskResult) -> None:
        self.open_tasks.pop(task_name, None)
        self.finished_tasks[task_name] = result

    def to_json(self, *, include_tasks: bool = True) -> dict[str, Any]:
        data: dict[str, Any] = {
            "name": self.name,
            "ip_address": self.ip_address,
            "port": self.port,
            "hardware_config": self.hardware_config,
            "initialized": self.initialized,
            "last_seen": self.last_seen,
        }
        if include_tasks:
            data["open_tasks"] = {k: dict(v) for k, v in self.open_tasks.items()}
            data["finished_tasks"] = {k: v.to_json() for k, v in self.finished_tasks.items()}
        return data

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> DeviceRecord:
        return cls(
            name=data["name"],
            ip_address=data.get("ip_address", ""),
            port=int(data.get("port", 0)),
            hardware_config=data.get("hardware_config"),
            open_tasks={k: dict(v) for k, v in data.get("open_tasks", {}).items()},
            finished_tasks={
                k: TaskResult.from_json(v) for k, v in data.get("finished_tasks", {}).items()
            },
            initialized=bool(data.get("initialized", False)),
            last_seen=int(data.get("last_seen", 0)),
        )


def hardware_matches(requirements: Mapping[str, Any], hardware_config: Mapping[str, Any] | None) -> bool:
    if not requirements:
        return True
    if not hardware_config:
        return False
    return all(key in hardware_config and hardware_config[key] == value for key, value in requirements.items())


def derive_seed(*parts: Any) -> int:
    """Stable 32-bit seed from arbitrary parts; unlike hash() it survives process boundaries."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def as_vector(values: Sequence[float] | ParameterVector, sample_count: int = 0) -> ParameterVector:
    if isinstance(values, ParameterVector):
        return values
    return ParameterVector(tuple(values), sample_count)
