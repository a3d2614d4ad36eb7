"""REST contract shared by the server, the workflow backend and the workers."""

from __future__ import annotations

import json
import urllib.error
import urllib.parse
import urllib.request
from enum import Enum
from typing import Any, Mapping

from feddart.core import Handle, TaskResult, TaskSpec, TaskStatus

AUTH_HEADER = "X-Feddart-Key"

TASKS_PATH = "/api/tasks"
DEVICES_PATH = "/api/devices"
REGISTER_PATH = "/api/devices/register"
POLL_PATH = "/api/worker/poll"
RESULT_PATH = "/api/worker/result"


class ErrorCode(str, Enum):
    UNAUTHORIZED = "UNAUTHORIZED"
    DEVICE_UNKNOWN = "DEVICE_UNKNOWN"
    TASK_UNKNOWN = "TASK_UNKNOWN"
    TASK_REJECTED = "TASK_REJECTED"
    BAD_REQUEST = "BAD_REQUEST"
    PAYLOAD_TOO_LARGE = "PAYLOAD_TOO_LARGE"


HTTP_STATUS = {
    ErrorCode.UNAUTHORIZED: 401,
    ErrorCode.DEVICE_UNKNOWN: 404,
    ErrorCode.TASK_UNKNOWN: 404,
    ErrorCode.TASK_REJECTED: 409,
    ErrorCode.BAD_REQUEST: 400,
    ErrorCode.PAYLOAD_TOO_LARGE: 413,
}


class ProtocolError(Exception):
    """An error the server reported through the response envelope."""

    def __init__(self, code: ErrorCode | str, message: str = "") -> None:
        self.code = ErrorCode(code)
        self.message = message
        super().__init__(f"{self.code.value}: {message}" if message else self.code.value)

    @property
    def http_status(self) -> int:
        return HTTP_STATUS[self.code]


class TransportError(ConnectionError):
    """The server could not be reached or answered with something unparseable."""


def ok_envelope(data: Any) -> dict[str, Any]:
    return {"ok": True, "error": None, "data": data}


def error_envelope(code: ErrorCode, message: str) -> dict[str, Any]:
    return {"ok": False, "error": {"code": code.value, "message": message}, "data": None}


def task_path(job_name: str, suffix: str = "") -> str:
    return f"{TASKS_PATH}/{urllib.parse.quote(job_name, safe='')}{suffix}"


def unwrap(envelope: Mapping[str, Any]) -> Any:
    if envelope.get("ok"):
        return envelope.get("data")
    error = envelope.get("error") or {}
    raise ProtocolError(error.get("code", ErrorCode.BAD_REQUEST), error.get("message", ""))


class ApiClient:
    """Typed calls for every endpoint, over any request function.

    ``send(method, path, body)`` must return the decoded response envelope.
    The HTTP client and the in-process test-mode server both plug in here, so
    the two modes share encoding and error handling.
    """

    def send(self, method: str, path: str, body: Any = None) -> Mapping[str, Any]:
        raise NotImplementedError

    def _call(self, method: str, path: str, body: Any = None) -> Any:
        return unwrap(self.send(method, path, body))

    # workflow side
    def add_task(self, job_name: str, spec: TaskSpec) -> Handle:
        data = self._call("POST", TASKS_PATH, {"job_name": job_name, "spec": spec.to_json()})
        return Handle.from_json(data["handle"])

    def get_job_results(
        self, job_name: str, amount: int, devices: list[str] | None = None
    ) -> list[TaskResult]:
        query = {"amount": str(amount)}
        if devices is not None:
            query["devices"] = ",".join(devices)
        path = task_path(job_name, "/results") + "?" + urllib.parse.urlencode(query)
        return [TaskResult.from_json(item) for item in self._call("GET", path)]

    def get_task_status(self, job_name: str) -> TaskStatus:
        return TaskStatus.from_json(self._call("GET", task_path(job_name, "/status")))

    def stop_task(self, job_name: str) -> bool:
        return bool(self._call("DELETE", task_path(job_name))["stopped"])

    def list_devices(self) -> list[dict[str, Any]]:
        return list(self._call("GET", DEVICES_PATH))

    # worker side
    def register_device(
        self,
        name: str,
        hardware_config: Mapping[str, Any] | None = None,
        *,
        ip_address: str = "",
        port: int = 0,
        poll_interval_seconds: float = 1.0,
    ) -> bool:
        body = {
            "name": name,
            "hardware_config": dict(hardware_config) if hardware_config is not None else None,
            "ip_address": ip_address,
            "port": port,
            "poll_interval_seconds": poll_interval_seconds,
        }
        return bool(self._call("POST", REGISTER_PATH, body)["registered"])

    def poll_assignment(self, device_name: str, wait_seconds: float = 0.0) -> dict[str, Any] | None:
        return self._call("POST", POLL_PATH, {"device_name": device_name, "wait_seconds": wait_seconds})

    def submit_result(self, device_name: str, task_name: str, result: TaskResult) -> bool:
        body = {"device_name": device_name, "task_name": task_name, "result": result.to_json()}
        return bool(self._call("POST", RESULT_PATH, body)["accepted"])


class HttpApiClient(ApiClient):
    def __init__(self, server_url: str, key: str, *, timeout: float = 30.0) -> None:
        self.base_url = server_url.rstrip("/")
        self.key = key
        self.timeout = timeout

    def send(self, method: str, path: str, body: Any = None) -> Mapping[str, Any]:
        payload = json.dumps(body, allow_nan=False).encode() if body is not None else None
        request = urllib.request.Request(self.base_url + path, data=payload, method=method)
        request.add_header(AUTH_HEADER, self.key)
        if payload is not None:
            request.add_header("Content-Type", "application/json")
        # Long polls hold the connection for up to wait_seconds.
        timeout = self.timeout
        if isinstance(body, dict) and "wait_seconds" in body:
            timeout += float(body["wait_seconds"])
        try:
            with urllib.request.urlopen(request, timeout=timeout) as response:
                raw = response.read()
        except urllib.error.HTTPError as exc:
            raw = exc.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"{method} {self.base_url}{path}: {exc}") from exc
        try:
            return json.loads(raw)
        except ValueError as exc:
            raise TransportError(f"unparseable response from {self.base_url}{path}") from exc
