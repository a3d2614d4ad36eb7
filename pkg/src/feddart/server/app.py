"""Request handling for the server.

All state mutations go through :class:`StateActor`, a single owner thread fed
by a command queue. Request handlers (HTTP threads or the in-process test-mode
transport) only post commands and wait for replies.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import urllib.parse
from concurrent.futures import Future
from typing import Any, Callable, Mapping, TypeVar

from feddart.core import DEFAULT_MAX_PAYLOAD_BYTES, TaskResult, TaskSpec
from feddart.protocol import (
    AUTH_HEADER,
    DEVICES_PATH,
    POLL_PATH,
    REGISTER_PATH,
    RESULT_PATH,
    TASKS_PATH,
    ErrorCode,
    ProtocolError,
    error_envelope,
    ok_envelope,
)
from feddart.server.journal import Journal
from feddart.server.state import ServerState

log = logging.getLogger("feddart.server")

T = TypeVar("T")

# How often the owner thread wakes up to expire overdue tasks when idle.
TICK_SECONDS = 0.05
MAX_POLL_WAIT_SECONDS = 60.0


class StateActor:
    def __init__(self, state: ServerState, *, journal: Journal | None = None) -> None:
        self.state = state
        self.journal = journal
        self._commands: queue.Queue[tuple[Callable[[ServerState], Any], Future, Any] | None] = queue.Queue()
        self._changed = threading.Condition()
        self._version = 0
        self._thread = threading.Thread(target=self._run, name="feddart-state", daemon=True)
        self._stopped = False
        self._thread.start()

    def call(self, command: Callable[[ServerState], T], *, notify: bool | Callable[[T], bool] = True) -> T:
        """Run ``command`` on the owner thread and return its result.

        ``notify`` says whether waiting pollers should be woken afterwards; it
        may be a predicate on the result. Read-only commands pass False.
        """
        if self._stopped:
            raise RuntimeError("state actor is shut down")
        future: Future = Future()
        self._commands.put((command, future, notify))
        return future.result()

    @property
    def version(self) -> int:
        with self._changed:
            return self._version

    def wait_for_change(self, seen_version: int, timeout: float) -> None:
        with self._changed:
            self._changed.wait_for(lambda: self._version != seen_version or self._stopped, timeout)

    def wake(self) -> None:
        """Release everyone blocked in wait_for_change."""
        self._bump()

    def _bump(self) -> None:
        with self._changed:
            self._version += 1
            self._changed.notify_all()

    def _expire_overdue(self) -> bool:
        expired = self.state.expire_overdue()
        for name in expired:
            log.info("task expired task=%s", name)
            if self.journal:
                self.journal.append(self.state.clock.now(), "expire", task_name=name)
        return bool(expired)

    def _run(self) -> None:
        while True:
            try:
                item = self._commands.get(timeout=TICK_SECONDS)
            except queue.Empty:
                if self._expire_overdue():
                    self._bump()
                continue
            if item is None:
                break
            command, future, notify = item
            changed = self._expire_overdue()
            try:
                result = command(self.state)
            except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
                future.set_exception(exc)
            else:
                changed = changed or (notify(result) if callable(notify) else notify)
                future.set_result(result)
            if changed:
                self._bump()
        with self._changed:
            self._changed.notify_all()

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self._commands.put(None)
        self._thread.join(timeout=5)
        if self.journal:
            self.journal.close()


class ServerApp:
    """Routes wire-protocol requests to the state actor."""

    def __init__(
        self,
        key: str,
        *,
        state: ServerState | None = None,
        journal: Journal | None = None,
        max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES,
    ) -> None:
        self.key = key
        self.max_payload_bytes = max_payload_bytes
        self.actor = StateActor(state or ServerState(), journal=journal)

    @property
    def state(self) -> ServerState:
        return self.actor.state

    def shutdown(self) -> None:
        self.actor.shutdown()

    def _journal(self, op: str, **args: Any) -> None:
        # Called from inside actor commands, so entries are written in apply order.
        if self.actor.journal:
            self.actor.journal.append(self.state.clock.now(), op, **args)

    # ---------------------------------------------------------------- entry

    def handle(
        self, method: str, path: str, headers: Mapping[str, str], body: bytes | None
    ) -> tuple[int, dict[str, Any]]:
        try:
            if headers.get(AUTH_HEADER) != self.key:
                raise ProtocolError(ErrorCode.UNAUTHORIZED, "missing or wrong key")
            if body is not None and len(body) > self.max_payload_bytes:
                raise ProtocolError(ErrorCode.PAYLOAD_TOO_LARGE, f"body exceeds {self.max_payload_bytes} bytes")
            payload = self._decode(body)
            return 200, ok_envelope(self._route(method, path, payload))
        except ProtocolError as exc:
            if exc.code is not ErrorCode.UNAUTHORIZED:
                log.debug("request rejected %s %s: %s", method, path, exc)
            else:
                log.warning("unauthorized request %s %s", method, path)
            return exc.http_status, error_envelope(exc.code, exc.message)

    @staticmethod
    def _decode(body: bytes | None) -> Any:
        if not body:
            return None
        try:
            return json.loads(body)
        except ValueError as exc:
            raise ProtocolError(ErrorCode.BAD_REQUEST, f"invalid JSON: {exc}") from None

    def _route(self, method: str, path: str, payload: Any) -> Any:
        parsed = urllib.parse.urlsplit(path)
        query = urllib.parse.parse_qs(parsed.query)
        parts = [urllib.parse.unquote(p) for p in parsed.path.strip("/").split("/")]
        try:
            if method == "POST" and parsed.path == TASKS_PATH:
                return self.add_task(payload)
            if method == "GET" and parsed.path == DEVICES_PATH:
                return self.actor.call(lambda st: st.list_devices(), notify=False)
            if method == "POST" and parsed.path == REGISTER_PATH:
                return self.register(payload)
            if method == "POST" and parsed.path == POLL_PATH:
                return self.poll(payload)
            if method == "POST" and parsed.path == RESULT_PATH:
                return self.submit_result(payload)
            if len(parts) >= 3 and parts[0] == "api" and parts[1] == "tasks":
                name = parts[2]
                if method == "GET" and len(parts) == 4 and parts[3] == "status":
                    return self.actor.call(lambda st: st.status(name), notify=False).to_json()
                if method == "GET" and len(parts) == 4 and parts[3] == "results":
                    return self.results(name, query)
                if method == "DELETE" and len(parts) == 3:
                    return {"stopped": self.stop_task(name)}
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(ErrorCode.BAD_REQUEST, f"malformed request: {exc!r}") from None
        raise ProtocolError(ErrorCode.BAD_REQUEST, f"no route for {method} {parsed.path}")

    # ------------------------------------------------------------- handlers

    def add_task(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        job_name = payload["job_name"]
        spec = TaskSpec.from_json(payload["spec"])
        if spec.task_name != job_name:
            raise ProtocolError(ErrorCode.BAD_REQUEST, "job_name and spec.task_name differ")

        def command(st: ServerState):
            handle = st.enqueue(spec)
            self._journal("enqueue", spec=spec.to_json())
            return handle

        handle = self.actor.call(command)
        log.info("task accepted task=%s kind=%s devices=%d", job_name, spec.task_kind.value, len(spec.device_names))
        return {"accepted": True, "handle": handle.to_json()}

    def register(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        args = {
            "name": payload["name"],
            "hardware_config": payload.get("hardware_config"),
            "ip_address": payload.get("ip_address", ""),
            "port": int(payload.get("port", 0)),
            "poll_interval_seconds": float(payload.get("poll_interval_seconds", 1.0)),
        }

        def command(st: ServerState):
            ok = st.register(
                args["name"],
                args["hardware_config"],
                ip_address=args["ip_address"],
                port=args["port"],
                poll_interval_seconds=args["poll_interval_seconds"],
            )
            self._journal("register", **args)
            return ok

        registered = self.actor.call(command)
        log.info("device registered device=%s", args["name"])
        return {"registered": registered}

    def poll(self, payload: Mapping[str, Any]) -> dict[str, Any] | None:
        device_name = payload["device_name"]
        wait = min(max(float(payload.get("wait_seconds", 0.0)), 0.0), MAX_POLL_WAIT_SECONDS)
        deadline = time.monotonic() + wait

        def command(st: ServerState):
            assignment = st.dispatch(device_name)
            if assignment is not None:
                self._journal("deliver", device_name=device_name, task_name=assignment["task_name"])
            return assignment

        while True:
            # Read the version first: any change after this point wakes the wait below.
            version = self.actor.version
            assignment = self.actor.call(command, notify=lambda a: a is not None)
            remaining = deadline - time.monotonic()
            if assignment is not None or remaining <= 0:
                break
            self.actor.wait_for_change(version, remaining)
        if assignment is not None:
            log.debug("assignment delivered device=%s task=%s", device_name, assignment["task_name"])
        return assignment

    def submit_result(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        device_name = payload["device_name"]
        task_name = payload["task_name"]
        result = TaskResult.from_json(payload["result"])

        def command(st: ServerState):
            status = st.record_result(device_name, task_name, result)
            self._journal("result", device_name=device_name, task_name=task_name, result=result.to_json())
            return status

        status = self.actor.call(command)
        log.info("result recorded device=%s task=%s state=%s", device_name, task_name, status.state.value)
        return {"accepted": True, "status": status.to_json()}

    def results(self, name: str, query: Mapping[str, list[str]]) -> list[dict[str, Any]]:
        amount = int(query["amount"][0]) if "amount" in query else None
        devices = None
        if "devices" in query:
            devices = [d for d in query["devices"][0].split(",") if d]
        found = self.actor.call(lambda st: st.results(name, amount, devices), notify=False)
        return [r.to_json() for r in found]

    def stop_task(self, name: str) -> bool:
        def command(st: ServerState):
            stopped = st.stop(name)
            if stopped:
                self._journal("stop", task_name=name)
            return stopped

        stopped = self.actor.call(command)
        if stopped:
            log.info("task stopped task=%s", name)
        return stopped
