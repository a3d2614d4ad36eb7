"""Per-task ephemeral structure: an aggregator tree over device holders."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Callable, Sequence

from feddart.backend.devices import DeviceSingle
from feddart.core import TaskResult, TaskState, TaskStatus, classify_status

if TYPE_CHECKING:
    from feddart.backend.runtime import DartRuntime
    from feddart.backend.task import Task

DEFAULT_HOLDER_CAPACITY = 32
DEFAULT_FANOUT = 8


class DeviceHolder:
    """A group of devices; every request to a device goes through its holder."""

    def __init__(self, devices: Sequence[DeviceSingle], capacity: int = DEFAULT_HOLDER_CAPACITY) -> None:
        if not 1 <= len(devices) <= capacity:
            raise ValueError(f"holder needs 1..{capacity} devices, got {len(devices)}")
        self.devices = list(devices)
        self.capacity = capacity

    @property
    def device_names(self) -> list[str]:
        return [d.name for d in self.devices]

    def broadcast_task(self, task: Task) -> None:
        for device in self.devices:
            device.start_task(task.task_name, task.spec.params_for(device.name))

    def status(self, server_status: TaskStatus) -> TaskState:
        names = set(self.device_names)
        return classify_status(server_status.finished_devices & names, server_status.pending_devices & names)

    def devices_finished(self, server_status: TaskStatus) -> bool:
        return self.status(server_status) is TaskState.COMPLETED

    def get_finished_tasks(self, task_name: str, runtime: DartRuntime) -> list[TaskResult]:
        """Fetch results for this holder's devices, one request per holder."""
        wanted = [d for d in self.devices if not d.has_result(task_name)]
        if wanted:
            for result in runtime.get_task_results(task_name, [d.name for d in wanted]):
                for device in wanted:
                    if device.name == result.device_name:
                        device.cache_result(task_name, result)
        found = (d.get_task_result(task_name) for d in self.devices)
        return [r for r in found if r is not None]


class Aggregator:
    def __init__(
        self,
        task: Task,
        device_holders: Sequence[DeviceHolder] = (),
        child_aggregators: Sequence[Aggregator] = (),
    ) -> None:
        self.task = task
        self.device_holders = list(device_holders)
        self.child_aggregators = list(child_aggregators)

    @property
    def depth(self) -> int:
        if not self.child_aggregators:
            return 1
        return 1 + max(child.depth for child in self.child_aggregators)

    def all_holders(self) -> list[DeviceHolder]:
        holders = list(self.device_holders)
        for child in self.child_aggregators:
            holders.extend(child.all_holders())
        return holders

    @property
    def device_names(self) -> list[str]:
        return [name for holder in self.all_holders() for name in holder.device_names]

    def send_task(self, runtime: DartRuntime) -> None:
        runtime.add_task(self.task.spec)
        for holder in self.all_holders():
            holder.broadcast_task(self.task)

    def is_task_finished(self, runtime: DartRuntime) -> TaskStatus:
        """Task status with the state taken as the meet of the holder states."""
        server_status = runtime.get_task_status(self.task.task_name)
        if server_status.state in (TaskState.QUEUED, TaskState.STOPPED) or server_status.state.terminal:
            return server_status
        states = [holder.status(server_status) for holder in self.all_holders()]
        if all(s is TaskState.COMPLETED for s in states):
            state = TaskState.COMPLETED
        elif all(s is TaskState.RUNNING for s in states):
            state = TaskState.RUNNING
        else:
            state = TaskState.PARTIAL
        return TaskStatus(state, server_status.finished_devices, server_status.pending_devices,
                          server_status.missing_devices)

    def request_aggregation(self, runtime: DartRuntime) -> list[TaskResult]:
        results: list[TaskResult] = []
        for holder in self.all_holders():
            results.extend(holder.get_finished_tasks(self.task.task_name, runtime))
        return results


def pack_devices(devices: Sequence[DeviceSingle], capacity: int) -> list[list[DeviceSingle]]:
    if capacity < 1:
        raise ValueError("holder capacity must be positive")
    return [list(devices[i : i + capacity]) for i in range(0, len(devices), capacity)]


def _attach(
    node: Aggregator,
    holders: Sequence[DeviceHolder],
    fanout: int,
    on_create: Callable[[str, object], None] | None,
) -> None:
    """Hang ``holders`` under ``node``, adding child levels while a node would exceed ``fanout``."""
    if len(holders) <= fanout:
        node.device_holders = list(holders)
        return
    # At most `fanout` children, each over a contiguous run of holders.
    per_child = max(fanout, math.ceil(len(holders) / fanout))
    for i in range(0, len(holders), per_child):
        child = Aggregator(node.task)
        if on_create:
            on_create("ChildAggregator", child)
        _attach(child, holders[i : i + per_child], fanout, on_create)
        node.child_aggregators.append(child)


def instantiate_aggregator(
    task: Task,
    devices: Sequence[DeviceSingle],
    *,
    capacity: int = DEFAULT_HOLDER_CAPACITY,
    fanout: int = DEFAULT_FANOUT,
    on_create: Callable[[str, object], None] | None = None,
) -> Aggregator:
    if not devices:
        raise ValueError("a task needs at least one device")
    if fanout < 2:
        raise ValueError("fanout must be at least 2")
    root = Aggregator(task)
    if on_create:
        on_create("Aggregator", root)
    holders = []
    for group in pack_devices(devices, capacity):
        holder = DeviceHolder(group, capacity)
        if on_create:
            on_create("DeviceHolder", holder)
        holders.append(holder)
    _attach(root, holders, fanout, on_create)
    return root
