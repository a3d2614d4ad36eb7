"""Coordination state of the server: registry, task queue, dispatch, results.

``ServerState`` is deliberately single-threaded. The server funnels every
request through one owner thread (see ``feddart.server.app``); tests drive it
directly with a ``ManualClock``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

from feddart.core import (
    DeviceRecord,
    Handle,
    SystemClock,
    TaskKind,
    TaskResult,
    TaskSpec,
    TaskState,
    TaskStatus,
    classify_status,
)
from feddart.protocol import ErrorCode, ProtocolError

DEFAULT_CAPACITY = 4
HEARTBEAT_FACTOR = 3


@dataclass
class _Task:
    spec: TaskSpec
    seq: int
    accepted_at: int
    started_at: int | None = None
    stopped: bool = False
    expired: bool = False
    delivered: set[str] = field(default_factory=set)
    # device -> result in arrival order
    finished: dict[str, TaskResult] = field(default_factory=dict)
    missing: frozenset[str] = frozenset()
    late_results: list[TaskResult] = field(default_factory=list)

    @property
    def kind(self) -> TaskKind:
        return self.spec.task_kind

    @property
    def closed(self) -> bool:
        return self.stopped or self.expired


class ServerState:
    def __init__(self, *, capacity: int = DEFAULT_CAPACITY, clock: Any = None) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.clock = clock or SystemClock()
        self.devices: dict[str, DeviceRecord] = {}
        self.poll_intervals: dict[str, float] = {}
        self.queue: deque[str] = deque()
        self.tasks: dict[str, _Task] = {}
        self.init_task: str | None = None
        self._seq = 0

    # ------------------------------------------------------------------ devices

    def register(
        self,
        name: str,
        hardware_config: Mapping[str, Any] | None = None,
        *,
        ip_address: str = "",
        port: int = 0,
        poll_interval_seconds: float = 1.0,
    ) -> bool:
        if not name:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "device name must be non-empty")
        now = self.clock.now()
        record = self.devices.get(name)
        if record is None:
            record = DeviceRecord(
                name=name,
                ip_address=ip_address,
                port=port,
                hardware_config=dict(hardware_config) if hardware_config is not None else None,
            )
            self.devices[name] = record
        record.last_seen = now
        self.poll_intervals[name] = max(float(poll_interval_seconds), 0.001)
        return True

    def _device(self, name: str) -> DeviceRecord:
        try:
            return self.devices[name]
        except KeyError:
            raise ProtocolError(ErrorCode.DEVICE_UNKNOWN, f"device {name!r} is not registered") from None

    def is_connected(self, name: str) -> bool:
        record = self._device(name)
        window_ms = HEARTBEAT_FACTOR * self.poll_intervals.get(name, 1.0) * 1000
        return self.clock.now() - record.last_seen <= window_ms

    def list_devices(self) -> list[dict[str, Any]]:
        summaries = []
        for name, record in self.devices.items():
            summary = record.to_json(include_tasks=False)
            summary["connected"] = self.is_connected(name)
            summaries.append(summary)
        return summaries

    # -------------------------------------------------------------------- tasks

    def _task(self, name: str) -> _Task:
        try:
            return self.tasks[name]
        except KeyError:
            raise ProtocolError(ErrorCode.TASK_UNKNOWN, f"task {name!r} is unknown") from None

    def _active_count(self) -> int:
        return sum(
            1
            for task in self.tasks.values()
            if task.kind is TaskKind.DEFAULT
            and task.started_at is not None
            and not self._terminal(task)
        )

    def _terminal(self, task: _Task) -> bool:
        return self._classify(task).terminal

    def enqueue(self, spec: TaskSpec) -> Handle:
        try:
            spec.validate()
        except ValueError as exc:
            raise ProtocolError(ErrorCode.BAD_REQUEST, str(exc)) from None
        if spec.task_name in self.tasks:
            raise ProtocolError(ErrorCode.TASK_REJECTED, f"duplicate task name {spec.task_name!r}")
        if spec.task_kind is TaskKind.INIT:
            if self.init_task is not None:
                raise ProtocolError(ErrorCode.TASK_REJECTED, f"init task {self.init_task!r} already set")
        else:
            unknown = sorted(set(spec.device_names) - set(self.devices))
            if unknown:
                raise ProtocolError(ErrorCode.TASK_REJECTED, f"unknown devices: {', '.join(unknown)}")
        now = self.clock.now()
        self._seq += 1
        task = _Task(spec=spec, seq=self._seq, accepted_at=now)
        self.tasks[spec.task_name] = task
        if spec.task_kind is TaskKind.INIT:
            # Never competes for capacity; it stays open for late joiners.
            self.init_task = spec.task_name
            task.started_at = now
        else:
            self.queue.append(spec.task_name)
            self._promote()
        return Handle(spec.task_name, now)

    def _promote(self) -> None:
        while self.queue and self._active_count() < self.capacity:
            task = self.tasks[self.queue.popleft()]
            task.started_at = self.clock.now()

    def _classify(self, task: _Task) -> TaskState:
        finished, pending = self._finished_pending(task)
        return classify_status(
            finished,
            pending,
            queued=task.started_at is None,
            stopped=task.stopped,
            expired=task.expired,
        )

    def _finished_pending(self, task: _Task) -> tuple[set[str], set[str]]:
        finished = set(task.finished)
        if task.kind is TaskKind.INIT:
            targets = set(self.devices)
        else:
            targets = set(task.spec.device_names)
        if task.closed:
            return finished, set()
        return finished, targets - finished

    def status(self, task_name: str) -> TaskStatus:
        task = self._task(task_name)
        finished, pending = self._finished_pending(task)
        return TaskStatus(
            state=self._classify(task),
            finished_devices=frozenset(finished),
            pending_devices=frozenset(pending),
            missing_devices=task.missing,
        )

    def results(
        self, task_name: str, amount: int | None = None, devices: list[str] | None = None
    ) -> list[TaskResult]:
        task = self._task(task_name)
        if amount is not None and amount < 0:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "amount must be non-negative")
        results = list(task.finished.values())
        if devices is not None:
            wanted = set(devices)
            results = [r for r in results if r.device_name in wanted]
        return results if amount is None else results[:amount]

    def dispatch(self, device_name: str) -> dict[str, Any] | None:
        """Hand the device its next assignment, or None if there is nothing for it."""
        record = self._device(device_name)
        record.last_seen = self.clock.now()
        if self.init_task is not None and not record.initialized:
            init = self.tasks[self.init_task]
            if device_name in init.delivered:
                return None
            return self._deliver(init, record)
        # dict order is acceptance order, so the oldest task wins
        for task in self.tasks.values():
            if (
                task.kind is TaskKind.DEFAULT
                and task.started_at is not None
                and not task.closed
                and device_name in task.spec.per_device_params
                and device_name not in task.delivered
            ):
                return self._deliver(task, record)
        return None

    def _deliver(self, task: _Task, record: DeviceRecord) -> dict[str, Any]:
        params = task.spec.params_for(record.name)
        task.delivered.add(record.name)
        record.open_task(task.spec.task_name, params)
        return {
            "task_name": task.spec.task_name,
            "execute_function": task.spec.execute_function,
            "task_kind": task.kind.value,
            "params": params,
            "max_wait_seconds": task.spec.max_wait_seconds,
        }

    def record_result(self, device_name: str, task_name: str, result: TaskResult) -> TaskStatus:
        record = self._device(device_name)
        task = self._task(task_name)
        if result.device_name != device_name:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "result device_name does not match submitter")
        if device_name in task.finished or task_name in record.finished_tasks:
            raise ProtocolError(ErrorCode.BAD_REQUEST, f"duplicate result for {task_name!r} from {device_name!r}")
        if task_name not in record.open_tasks:
            raise ProtocolError(ErrorCode.TASK_UNKNOWN, f"task {task_name!r} is not open on {device_name!r}")
        record.last_seen = self.clock.now()
        record.finish_task(task_name, result)
        if task.closed:
            # Kept for audit only; the task's result set is frozen.
            task.late_results.append(result)
            return self.status(task_name)
        task.finished[device_name] = result
        if task.kind is TaskKind.INIT:
            record.initialized = True
        status = self.status(task_name)
        if status.state.terminal:
            self._promote()
        return status

    def stop(self, task_name: str) -> bool:
        task = self._task(task_name)
        if self._terminal(task):
            return False
        task.stopped = True
        if task_name in self.queue:
            self.queue.remove(task_name)
        if self.init_task == task_name:
            self.init_task = None
        self._promote()
        return True

    def expire(self, task_name: str, *, force: bool = False) -> TaskStatus:
        task = self._task(task_name)
        if task.kind is TaskKind.INIT or task.started_at is None or self._terminal(task):
            return self.status(task_name)
        deadline = task.started_at + int(task.spec.max_wait_seconds * 1000)
        if not force and self.clock.now() < deadline:
            return self.status(task_name)
        finished, pending = self._finished_pending(task)
        task.missing = frozenset(pending)
        task.expired = True
        self._promote()
        return self.status(task_name)

    def overdue_tasks(self) -> list[str]:
        now = self.clock.now()
        return [
            name
            for name, task in self.tasks.items()
            if task.kind is TaskKind.DEFAULT
            and task.started_at is not None
            and not self._terminal(task)
            and now >= task.started_at + int(task.spec.max_wait_seconds * 1000)
        ]

    def expire_overdue(self) -> list[str]:
        expired = self.overdue_tasks()
        for name in expired:
            self.expire(name, force=True)
        return expired

    def snapshot(self) -> dict[str, Any]:
        """Time-free view of the state, for comparisons against reference models."""
        return {
            "devices": {
                name: {
                    "initialized": rec.initialized,
                    "open": sorted(rec.open_tasks),
                    "finished": sorted(rec.finished_tasks),
                }
                for name, rec in sorted(self.devices.items())
            },
            "queue": list(self.queue),
            "tasks": {
                name: {
                    "state": self._classify(task).value,
                    "delivered": sorted(task.delivered),
                    "finished": list(task.finished),
                    "missing": sorted(task.missing),
                }
                for name, task in sorted(self.tasks.items())
            },
            "init_task": self.init_task,
        }
