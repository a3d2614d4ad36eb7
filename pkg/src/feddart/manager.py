"""Non-blocking workflow API used by aggregation-side scripts.

Typical use::

    wm = WorkflowManager()
    wm.create_init_task({"model_structure": structure}, "init")
    wm.start_fed_dart("server.json", "devices.json")
    handle = wm.start_task({"client1": {"epochs": 10}}, "learn")
    ...                                   # keep working
    results = wm.get_task_result(handle)  # whatever has arrived so far
"""

from __future__ import annotations

import itertools
import logging
import os
import threading
import time
import uuid
from typing import Any, Callable, Mapping

from feddart.backend.runtime import DartRuntime, LocalServer
from feddart.backend.selector import Selector
from feddart.backend.task import RejectionReason, TaskRejected
from feddart.config import ConfigError, DeviceConfig, ServerConfig, load_device_config
from feddart.core import BROADCAST_KEY, Handle, TaskKind, TaskResult, TaskSpec, TaskStatus
from feddart.logserver import LogServer
from feddart.protocol import HttpApiClient, ProtocolError, TransportError
from feddart.worker.runtime import Worker

log = logging.getLogger("feddart.manager")

DEFAULT_INIT_TIMEOUT = 120.0
DEFAULT_MAX_WAIT = 60.0


class WorkflowError(RuntimeError):
    def __init__(self, code: str, message: str = "", reason: RejectionReason | None = None) -> None:
        self.code = code
        self.message = message
        self.reason = reason
        super().__init__(f"{code}: {message}" if message else code)


class WorkflowManager:
    def __init__(
        self,
        *,
        test_mode: bool = False,
        worker_factory: Callable[[DeviceConfig], Worker] | None = None,
        init_timeout: float = DEFAULT_INIT_TIMEOUT,
        status_poll_seconds: float = 0.01,
        holder_capacity: int = 32,
        fanout: int = 8,
        logger: LogServer | None = None,
    ) -> None:
        self.test_mode = test_mode
        self.worker_factory = worker_factory
        self.init_timeout = init_timeout
        self.status_poll_seconds = status_poll_seconds
        self.holder_capacity = holder_capacity
        self.fanout = fanout
        self.logger = logger
        self.selector: Selector | None = None
        self.runtime: DartRuntime | None = None
        self.init_task: TaskSpec | None = None
        self.current_device_names: list[str] = []
        self.expected_devices: list[str] = []
        self._names = itertools.count(1)
        self._prefix = uuid.uuid4().hex[:8]
        self._write_lock = threading.Lock()

    # ------------------------------------------------------------- starting

    def create_init_task(
        self, parameter_dict: Mapping[str, Any], execute_function: str = "init", file_path: str | None = None
    ) -> None:
        """Store the task every client runs once before anything else. Last call wins."""
        if self.selector is not None:
            raise WorkflowError("ALREADY_CONNECTED", "the init task must be created before start_fed_dart")
        self.init_task = TaskSpec(
            task_name=f"init-{self._prefix}",
            execute_function=execute_function,
            per_device_params={BROADCAST_KEY: dict(parameter_dict)},
            task_kind=TaskKind.INIT,
            max_wait_seconds=self.init_timeout,
        )

    def start_fed_dart(self, server_file: str | os.PathLike[str], device_file: str | os.PathLike[str] | None = None) -> None:
        """Connect, schedule the init task and wait until every expected client ran it."""
        if self.selector is not None:
            raise WorkflowError("ALREADY_CONNECTED", "start_fed_dart was already called")
        try:
            config = ServerConfig.load(server_file)
            devices = load_device_config(device_file) if device_file is not None else {}
        except ConfigError as exc:
            raise WorkflowError("CONNECT_FAILED", str(exc)) from exc
        self.connect(config, devices)

    def connect(self, config: ServerConfig, devices: Mapping[str, DeviceConfig]) -> None:
        if self.test_mode:
            client = LocalServer(devices, self.worker_factory)
        else:
            client = HttpApiClient(config.server, config.client_key)
        runtime = DartRuntime(client, test_mode=self.test_mode)
        selector = Selector(runtime, holder_capacity=self.holder_capacity, fanout=self.fanout)
        try:
            selector.update_registered_devices()
        except (TransportError, ProtocolError) as exc:
            runtime.close()
            raise WorkflowError("CONNECT_FAILED", f"cannot reach {config.server}: {exc}") from exc
        self.runtime, self.selector = runtime, selector
        self.expected_devices = list(devices)
        log.info("connected server=%s test_mode=%s devices=%d", config.server, self.test_mode, len(devices))
        if self.init_task is not None:
            selector.init_required = True
            selector.submit(self.init_task)
            self._wait_for_initialization()

    def _wait_for_initialization(self) -> None:
        deadline = time.monotonic() + self.init_timeout
        while True:
            devices = {d.name: d for d in self.selector.update_registered_devices()}
            expected = self.expected_devices or list(devices)
            if all(name in devices and devices[name].initialized for name in expected):
                self.current_device_names = sorted(devices)
                log.info("initialization finished devices=%d", len(expected))
                return
            if time.monotonic() >= deadline:
                missing = sorted(n for n in expected if n not in devices or not devices[n].initialized)
                raise WorkflowError("INIT_TIMEOUT", f"not initialized: {', '.join(missing)}")
            time.sleep(self.status_poll_seconds)

    def _require_connected(self) -> Selector:
        if self.selector is None:
            raise WorkflowError("NOT_CONNECTED", "call start_fed_dart first")
        return self.selector

    def get_all_device_names(self) -> list[str]:
        """Names of the clients that are currently connected."""
        selector = self._require_connected()
        devices = selector.update_registered_devices()
        self.current_device_names = sorted(d.name for d in devices if d.connected)
        return list(self.current_device_names)

    # ---------------------------------------------------------------- tasks

    def start_task(
        self,
        parameter_dict: Mapping[str, Mapping[str, Any]],
        execute_function: str,
        max_wait_seconds: float = DEFAULT_MAX_WAIT,
        *,
        file_path: str | None = None,
        task_name: str | None = None,
        hardware_requirements: Mapping[str, Any] | None = None,
    ) -> Handle:
        """Submit a task and return its handle without waiting for any client."""
        selector = self._require_connected()
        name = task_name or f"task-{self._prefix}-{next(self._names)}"
        spec = TaskSpec(
            task_name=name,
            execute_function=execute_function,
            per_device_params={k: dict(v) for k, v in parameter_dict.items()},
            task_kind=TaskKind.DEFAULT,
            max_wait_seconds=max_wait_seconds,
            hardware_requirements=dict(hardware_requirements or {}),
        )
        with self._write_lock:
            try:
                selector.submit(spec)
            except TaskRejected as exc:
                raise WorkflowError("TASK_REJECTED", exc.message, exc.reason) from exc
            except ProtocolError as exc:
                raise WorkflowError(exc.code.value, exc.message) from exc
        return Handle(name, int(time.time() * 1000))

    def get_task_status(self, handle: Handle) -> TaskStatus:
        return self._protocol_call(lambda s: s.status(handle.task_name))

    def get_task_result(self, handle: Handle) -> list[TaskResult]:
        return self._protocol_call(lambda s: s.results(handle.task_name))

    def stop_task(self, handle: Handle) -> bool:
        return self._protocol_call(lambda s: s.stop(handle.task_name))

    def _protocol_call(self, fn: Callable[[Selector], Any]) -> Any:
        selector = self._require_connected()
        try:
            return fn(selector)
        except ProtocolError as exc:
            raise WorkflowError(exc.code.value, exc.message) from exc

    def wait_for_task(self, handle: Handle, timeout: float | None = None) -> TaskStatus:
        """Poll until the task is finished or ``timeout`` passes; returns the last status."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            status = self.get_task_status(handle)
            if status.state.terminal:
                return status
            if deadline is not None and time.monotonic() >= deadline:
                return status
            time.sleep(self.status_poll_seconds)

    def close(self) -> None:
        if self.runtime is not None:
            self.runtime.close()
        if self.logger is not None:
            self.logger.close()

    def __enter__(self) -> WorkflowManager:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
