"""Transport layer of the workflow backend.

``DartRuntime`` translates backend requests into wire-protocol calls on an
:class:`~feddart.protocol.ApiClient`. In production that client speaks HTTP;
in test mode it is a :class:`LocalServer`, an in-process server double that
also plays the devices listed in the device file, one task at a time.
"""

from __future__ import annotations

import json
import logging
import threading
from typing import Any, Callable, Mapping

from feddart.config import DeviceConfig
from feddart.core import DeviceRecord, Handle, TaskResult, TaskSpec, TaskStatus
from feddart.protocol import AUTH_HEADER, ApiClient
from feddart.server.app import ServerApp
from feddart.server.state import DEFAULT_CAPACITY, ServerState
from feddart.worker.runtime import Worker

log = logging.getLogger("feddart.backend")

LOCAL_KEY = "local-test-mode"
# Simulated devices never drop out, even while a long task blocks the executor.
LOCAL_POLL_INTERVAL = 3600.0
IDLE_WAIT_SECONDS = 0.5


class LocalServer(ApiClient):
    """In-process server double with sequentially executed simulated devices.

    Requests pass through the same JSON encoding and request handler as the
    HTTP server, so status codes, errors and payloads are identical.
    """

    def __init__(
        self,
        devices: Mapping[str, DeviceConfig],
        worker_factory: Callable[[DeviceConfig], Worker] | None = None,
        *,
        capacity: int = DEFAULT_CAPACITY,
        clock: Any = None,
    ) -> None:
        self.app = ServerApp(LOCAL_KEY, state=ServerState(capacity=capacity, clock=clock))
        self.devices = dict(devices)
        self.workers: dict[str, Worker] = {}
        for name, device in self.devices.items():
            self.register_device(
                name,
                device.hardware_config,
                ip_address=device.ip_address,
                port=device.port,
                poll_interval_seconds=LOCAL_POLL_INTERVAL,
            )
            if worker_factory is not None:
                self.workers[name] = worker_factory(device)
        self.execution_log: list[tuple[str, str, str]] = []
        self._closed = threading.Event()
        self._thread: threading.Thread | None = None
        if self.workers:
            self._thread = threading.Thread(target=self._execute_loop, name="feddart-local", daemon=True)
            self._thread.start()

    def send(self, method: str, path: str, body: Any = None) -> Mapping[str, Any]:
        raw = json.dumps(body, allow_nan=False).encode() if body is not None else None
        status, envelope = self.app.handle(method, path, {AUTH_HEADER: LOCAL_KEY}, raw)
        return json.loads(json.dumps(envelope))

    def _execute_loop(self) -> None:
        while not self._closed.is_set():
            version = self.app.actor.version
            ran = False
            for name, worker in self.workers.items():
                if self._closed.is_set():
                    return
                assignment = self.poll_assignment(name, 0.0)
                if assignment is None:
                    continue
                task_name = assignment["task_name"]
                function = assignment["execute_function"]
                self.execution_log.append(("start", name, task_name))
                result = worker.execute(function, assignment.get("params") or {}, task_name)
                self.execution_log.append(("end", name, task_name))
                try:
                    self.submit_result(name, task_name, result)
                except Exception as exc:  # noqa: BLE001 - keep simulating the other devices
                    log.warning("test mode: submit failed device=%s task=%s: %s", name, task_name, exc)
                ran = True
            if not ran:
                self.app.actor.wait_for_change(version, IDLE_WAIT_SECONDS)

    def close(self) -> None:
        self._closed.set()
        self.app.actor.wake()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self.app.shutdown()


class DartRuntime:
    """Backend-facing helper around the wire client (HTTP or test mode)."""

    def __init__(self, client: ApiClient, *, test_mode: bool = False) -> None:
        self.client = client
        self.test_mode = test_mode

    def update_registered_devices(self) -> list[dict[str, Any]]:
        return self.client.list_devices()

    def add_task(self, spec: TaskSpec) -> Handle:
        return self.client.add_task(spec.task_name, spec)

    def get_task_status(self, task_name: str) -> TaskStatus:
        return self.client.get_task_status(task_name)

    def get_task_results(self, task_name: str, device_names: list[str] | None = None) -> list[TaskResult]:
        amount = len(device_names) if device_names is not None else 1_000_000
        return self.client.get_job_results(task_name, amount, device_names)

    def get_task_result(self, task_name: str, device_name: str) -> TaskResult | None:
        found = self.get_task_results(task_name, [device_name])
        return found[0] if found else None

    def stop_task(self, task_name: str) -> bool:
        return self.client.stop_task(task_name)

    def close(self) -> None:
        if isinstance(self.client, LocalServer):
            self.client.close()


def record_from_summary(summary: Mapping[str, Any]) -> DeviceRecord:
    return DeviceRecord(
        name=summary["name"],
        ip_address=summary.get("ip_address", ""),
        port=int(summary.get("port", 0)),
        hardware_config=summary.get("hardware_config"),
        initialized=bool(summary.get("initialized", False)),
        last_seen=int(summary.get("last_seen", 0)),
    )
