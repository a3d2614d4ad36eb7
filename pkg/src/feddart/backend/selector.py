"""The selector: device mirror, task acceptance, aggregator lifecycle."""

from __future__ import annotations

import logging
import threading
from collections import deque
from typing import Any

from feddart.backend.aggregator import (
    DEFAULT_FANOUT,
    DEFAULT_HOLDER_CAPACITY,
    Aggregator,
    instantiate_aggregator,
)
from feddart.backend.devices import DeviceSingle
from feddart.backend.runtime import DartRuntime, record_from_summary
from feddart.backend.task import RejectionReason, Task, TaskRejected
from feddart.core import TaskKind, TaskResult, TaskSpec, TaskStatus
from feddart.protocol import ErrorCode, ProtocolError

log = logging.getLogger("feddart.selector")


class Selector:
    """Single writer of backend state.

    The device list mirrors the server and is refreshed from it before every
    acceptance decision; the server stays the authority on who exists.
    """

    def __init__(
        self,
        runtime: DartRuntime,
        *,
        holder_capacity: int = DEFAULT_HOLDER_CAPACITY,
        fanout: int = DEFAULT_FANOUT,
    ) -> None:
        self.runtime = runtime
        self.holder_capacity = holder_capacity
        self.fanout = fanout
        self.devices: dict[str, DeviceSingle] = {}
        self.task_queue: deque[Task] = deque()
        self.aggregators: dict[str, Aggregator] = {}
        self.known_tasks: dict[str, Task] = {}
        self.init_required = False
        # (kind, task_name) in construction order, for lifecycle inspection.
        self.creation_log: list[tuple[str, str]] = []
        self._lock = threading.RLock()

    def update_registered_devices(self) -> list[DeviceSingle]:
        summaries = self.runtime.update_registered_devices()
        with self._lock:
            for summary in summaries:
                device = self.devices.get(summary["name"])
                if device is None:
                    self.devices[summary["name"]] = DeviceSingle(
                        record_from_summary(summary), connected=bool(summary.get("connected", True))
                    )
                else:
                    device.refresh(summary)
            return list(self.devices.values())

    def request_task_acceptance(self, spec: TaskSpec) -> Task:
        """Validate ``spec`` against the device mirror, raising TaskRejected if it cannot run."""
        self.update_registered_devices()
        task = Task(spec)
        with self._lock:
            reason = task.check_constraints(
                self.devices.values(),
                init_required=self.init_required,
                known_task_names=self.known_tasks,
            )
        if reason is not None:
            log.info("task rejected task=%s reason=%s", spec.task_name, reason.value)
            raise TaskRejected(reason, self._explain(task, reason))
        self.creation_log.append(("Task", spec.task_name))
        return task

    def _explain(self, task: Task, reason: RejectionReason) -> str:
        if reason is RejectionReason.UNKNOWN_DEVICE:
            unknown = sorted(set(task.device_names) - set(self.devices))
            return f"unknown devices: {', '.join(unknown)}"
        if reason is RejectionReason.NOT_INITIALIZED:
            pending = sorted(n for n in task.device_names if n in self.devices and not self.devices[n].initialized)
            return f"devices not initialized: {', '.join(pending)}"
        if reason is RejectionReason.CONSTRAINT_UNMET:
            return f"hardware requirements {dict(task.spec.hardware_requirements)} not met"
        if reason is RejectionReason.DUPLICATE_NAME:
            return f"task name {task.task_name!r} already used"
        return "invalid task"

    def submit(self, spec: TaskSpec) -> Task:
        """Accept, queue and dispatch a task; default tasks get an aggregator."""
        task = self.request_task_acceptance(spec)
        with self._lock:
            self.known_tasks[task.task_name] = task
            self.task_queue.append(task)
            try:
                self._flush_queue()
            except BaseException:
                self.known_tasks.pop(task.task_name, None)
                raise
        return task

    def _flush_queue(self) -> None:
        while self.task_queue:
            task = self.task_queue[0]
            if task.spec.task_kind is TaskKind.INIT:
                self.runtime.add_task(task.spec)
            else:
                aggregator = self.instantiate_aggregator(task)
                try:
                    aggregator.send_task(self.runtime)
                except ProtocolError as exc:
                    self.aggregators.pop(task.task_name, None)
                    self.task_queue.popleft()
                    if exc.code is ErrorCode.TASK_REJECTED:
                        raise TaskRejected(RejectionReason.UNKNOWN_DEVICE, exc.message) from exc
                    raise
            self.task_queue.popleft()

    def instantiate_aggregator(self, task: Task) -> Aggregator:
        devices = [self.devices[name] for name in task.device_names]

        def created(kind: str, _obj: Any) -> None:
            self.creation_log.append((kind, task.task_name))

        aggregator = instantiate_aggregator(
            task, devices, capacity=self.holder_capacity, fanout=self.fanout, on_create=created
        )
        self.aggregators[task.task_name] = aggregator
        return aggregator

    def _task(self, task_name: str) -> Task:
        try:
            return self.known_tasks[task_name]
        except KeyError:
            raise ProtocolError(ErrorCode.TASK_UNKNOWN, f"task {task_name!r} is unknown") from None

    def status(self, task_name: str) -> TaskStatus:
        task = self._task(task_name)
        aggregator = self.aggregators.get(task_name)
        if aggregator is None:
            return self.runtime.get_task_status(task.task_name)
        status = aggregator.is_task_finished(self.runtime)
        if status.state.terminal:
            # Pull the final results into the device caches before retiring.
            aggregator.request_aggregation(self.runtime)
            self._retire(task_name)
        return status

    def results(self, task_name: str) -> list[TaskResult]:
        task = self._task(task_name)
        aggregator = self.aggregators.get(task_name)
        if aggregator is not None:
            # Status first: once terminal the result set is frozen, so this fetch is final.
            status = self.runtime.get_task_status(task_name)
            results = aggregator.request_aggregation(self.runtime)
            if status.state.terminal:
                self._retire(task_name)
            return results
        if task.spec.task_kind is TaskKind.INIT:
            return self.runtime.get_task_results(task_name)
        cached = (self.devices[name].get_task_result(task_name) for name in task.device_names)
        return [r for r in cached if r is not None]

    def stop(self, task_name: str) -> bool:
        self._task(task_name)
        stopped = self.runtime.stop_task(task_name)
        aggregator = self.aggregators.get(task_name)
        if aggregator is not None:
            aggregator.request_aggregation(self.runtime)
            self._retire(task_name)
        return stopped

    def _retire(self, task_name: str) -> None:
        with self._lock:
            if self.aggregators.pop(task_name, None) is not None:
                log.debug("aggregator retired task=%s", task_name)
