"""The worker daemon: register, long-poll for assignments, execute, submit."""

from __future__ import annotations

import importlib
import json
import logging
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from feddart.config import KEY_ENV_VAR, ConfigError, read_json
from feddart.core import TaskResult
from feddart.protocol import ApiClient, ErrorCode, HttpApiClient, ProtocolError, TransportError

log = logging.getLogger("feddart.worker")

DEFAULT_REGISTRY = "feddart.fact.client:build_registry"
SUBMIT_ATTEMPTS = 3

TaskFunction = Callable[[Mapping[str, Any]], Mapping[str, Any]]


@dataclass
class WorkerConfig:
    server_url: str
    key: str
    device_name: str
    output_dir: str
    hardware_config: dict[str, Any] | None = None
    poll_interval_seconds: float = 1.0
    function_registry_ref: str = DEFAULT_REGISTRY
    # Local data source for the registry's task functions (see feddart.fact.data).
    data: dict[str, Any] | None = None

    def validate(self) -> None:
        if not self.device_name:
            raise ConfigError("device_name must be non-empty")
        if not self.poll_interval_seconds > 0:
            raise ConfigError("poll_interval_seconds must be positive")
        try:
            Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output_dir {self.output_dir!r} is not writable: {exc}") from None
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"output_dir {self.output_dir!r} is not writable")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], *, env: Mapping[str, str] | None = None) -> WorkerConfig:
        env = os.environ if env is None else env
        try:
            config = cls(
                server_url=str(data["server_url"]),
                key=str(env.get(KEY_ENV_VAR) or data["key"]),
                device_name=str(data["device_name"]),
                output_dir=str(data.get("output_dir", ".")),
                hardware_config=data.get("hardware_config"),
                poll_interval_seconds=float(data.get("poll_interval_seconds", 1.0)),
                function_registry_ref=str(data.get("function_registry_ref", DEFAULT_REGISTRY)),
                data=data.get("data"),
            )
        except KeyError as exc:
            raise ConfigError(f"worker config is missing {exc.args[0]!r}") from None
        return config

    @classmethod
    def load(cls, path: str | os.PathLike[str], **overrides: Any) -> WorkerConfig:
        data = read_json(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        base = Path(path).parent
        if "output_dir" in data and not Path(data["output_dir"]).is_absolute():
            data["output_dir"] = str(base / data["output_dir"])
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(data)


@dataclass
class WorkerContext:
    """What a task-function registry knows about the device it runs on."""

    device_name: str
    output_dir: str
    data: dict[str, Any] | None = None
    hardware_config: dict[str, Any] | None = None
    state: dict[str, Any] = field(default_factory=dict)


def load_registry(ref: str, context: WorkerContext) -> dict[str, TaskFunction]:
    """Import ``module:factory`` and build the device's function registry."""
    module_name, _, attr = ref.partition(":")
    if not attr:
        raise ConfigError(f"function_registry_ref must look like 'module:factory', got {ref!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load function registry {ref!r}: {exc}") from None
    registry = factory(context)
    return dict(registry)


class Worker:
    """Executes assignments against a function registry. One task at a time."""

    def __init__(self, context: WorkerContext, registry: Mapping[str, TaskFunction]) -> None:
        self.context = context
        self.registry = dict(registry)
        self._busy = threading.Lock()

    @property
    def device_name(self) -> str:
        return self.context.device_name

    @classmethod
    def from_config(cls, config: WorkerConfig) -> Worker:
        context = WorkerContext(
            device_name=config.device_name,
            output_dir=config.output_dir,
            data=config.data,
            hardware_config=config.hardware_config,
        )
        return cls(context, load_registry(config.function_registry_ref, context))

    def execute(self, function_name: str, params: Mapping[str, Any], task_name: str = "") -> TaskResult:
        if not self._busy.acquire(blocking=False):
            raise RuntimeError(f"worker {self.device_name!r} is already executing a task")
        try:
            return self._execute(function_name, params, task_name)
        finally:
            self._busy.release()

    def _execute(self, function_name: str, params: Mapping[str, Any], task_name: str) -> TaskResult:
        fn = self.registry.get(function_name)
        started = time.perf_counter()
        if fn is None:
            result_dict: dict[str, Any] = {"error": f"unknown function {function_name!r}"}
        else:
            try:
                result_dict = dict(fn(params) or {})
            except Exception as exc:  # noqa: BLE001 - reported back as a failed result
                log.warning("task failed device=%s task=%s error=%r", self.device_name, task_name, exc)
                result_dict = {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
        duration = time.perf_counter() - started
        result = TaskResult.build(self.device_name, duration, result_dict)
        if task_name:
            self._write_task_log(task_name, function_name, result)
        return result

    def _write_task_log(self, task_name: str, function_name: str, result: TaskResult) -> None:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in task_name)
        entry = {
            "task_name": task_name,
            "execute_function": function_name,
            "device_name": self.device_name,
            "duration_seconds": result.duration_seconds,
            "failed": result.failed,
            "error": result.result_dict.get("error"),
        }
        try:
            out = Path(self.context.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / f"{safe}.log", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, default=str) + "\n")
        except OSError as exc:
            log.warning("cannot write task log for %s: %s", task_name, exc)


def _backoff(attempt: int, base: float = 0.1, cap: float = 5.0) -> float:
    return min(cap, base * (2**attempt))


def register_with_backoff(
    client: ApiClient, config: WorkerConfig, stop: threading.Event, *, max_attempts: int | None = None
) -> bool:
    attempt = 0
    while not stop.is_set():
        try:
            client.register_device(
                config.device_name,
                config.hardware_config,
                poll_interval_seconds=config.poll_interval_seconds,
            )
            log.info("registered device=%s server=%s", config.device_name, config.server_url)
            return True
        except TransportError as exc:
            delay = _backoff(attempt)
            log.info("server unreachable, retrying in %.2fs: %s", delay, exc)
        attempt += 1
        if max_attempts is not None and attempt >= max_attempts:
            return False
        stop.wait(_backoff(attempt - 1))
    return False


def submit_with_retry(client: ApiClient, device_name: str, task_name: str, result: TaskResult) -> bool:
    for attempt in range(SUBMIT_ATTEMPTS):
        try:
            return client.submit_result(device_name, task_name, result)
        except TransportError as exc:
            log.warning("submit failed task=%s attempt=%d: %s", task_name, attempt + 1, exc)
            time.sleep(_backoff(attempt))
        except ProtocolError as exc:
            log.warning("submit rejected task=%s: %s", task_name, exc)
            return False
    log.error("dropping result task=%s after %d attempts", task_name, SUBMIT_ATTEMPTS)
    return False


def run_loop(
    config: WorkerConfig,
    *,
    stop: threading.Event | None = None,
    client: ApiClient | None = None,
    worker: Worker | None = None,
) -> int:
    """Serve assignments until ``stop`` is set. Returns the number of tasks run."""
    config.validate()
    stop = stop or threading.Event()
    client = client or HttpApiClient(config.server_url, config.key)
    worker = worker or Worker.from_config(config)
    executed = 0
    if not register_with_backoff(client, config, stop):
        return executed
    failures = 0
    while not stop.is_set():
        try:
            assignment = client.poll_assignment(config.device_name, config.poll_interval_seconds)
            failures = 0
        except TransportError as exc:
            delay = _backoff(failures)
            failures += 1
            log.info("poll failed, retrying in %.2fs: %s", delay, exc)
            stop.wait(delay)
            continue
        except ProtocolError as exc:
            if exc.code is ErrorCode.DEVICE_UNKNOWN:
                # Server lost its state; join again.
                register_with_backoff(client, config, stop)
                continue
            raise
        if assignment is None:
            continue
        task_name = assignment["task_name"]
        log.info("executing device=%s task=%s function=%s", config.device_name, task_name, assignment["execute_function"])
        result = worker.execute(assignment["execute_function"], assignment.get("params") or {}, task_name)
        submit_with_retry(client, config.device_name, task_name, result)
        executed += 1
    log.info("worker stopped device=%s tasks=%d", config.device_name, executed)
    return executed
