from __future__ import annotations

import threading
from typing import Any, Mapping

from feddart.core import DeviceRecord, TaskResult


class DeviceSingle:
    """Backend mirror of one client.

    Caches the parameters of open tasks and the results of finished ones, so
    results stay readable after a task's aggregator is gone.
    """

    def __init__(self, record: DeviceRecord, *, connected: bool = True) -> None:
        self.record = record
        self.connected = connected
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.record.name

    @property
    def hardware_config(self) -> dict[str, Any] | None:
        return self.record.hardware_config

    @property
    def initialized(self) -> bool:
        return self.record.initialized

    def refresh(self, summary: Mapping[str, Any]) -> None:
        with self._lock:
            self.record.ip_address = summary.get("ip_address", self.record.ip_address)
            self.record.port = int(summary.get("port", self.record.port))
            self.record.hardware_config = summary.get("hardware_config")
            self.record.initialized = bool(summary.get("initialized", False))
            self.record.last_seen = int(summary.get("last_seen", self.record.last_seen))
            self.connected = bool(summary.get("connected", True))

    def start_task(self, task_name: str, params: Mapping[str, Any]) -> None:
        with self._lock:
            self.record.open_task(task_name, params)

    def cache_result(self, task_name: str, result: TaskResult) -> None:
        with self._lock:
            if task_name not in self.record.finished_tasks:
                self.record.finish_task(task_name, result)

    def get_task_result(self, task_name: str) -> TaskResult | None:
        with self._lock:
            return self.record.finished_tasks.get(task_name)

    def has_result(self, task_name: str) -> bool:
        with self._lock:
            return task_name in self.record.finished_tasks

    def __repr__(self) -> str:
        return f"DeviceSingle({self.name!r}, initialized={self.initialized}, connected={self.connected})"
