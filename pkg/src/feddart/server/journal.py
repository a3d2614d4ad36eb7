"""Best-effort append-only journal of state mutations, replayed on restart."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Iterator

from feddart.core import ManualClock, TaskResult, TaskSpec
from feddart.protocol import ProtocolError
from feddart.server.state import ServerState

log = logging.getLogger("feddart.server.journal")


class Journal:
    def __init__(self, path: str | os.PathLike[str]) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a", encoding="utf-8")

    def append(self, at: int, op: str, **args: Any) -> None:
        self._fh.write(json.dumps({"at": at, "op": op, **args}, separators=(",", ":")) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_entries(path: str | os.PathLike[str]) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except ValueError:
                # A torn final write is expected after a crash.
                log.warning("journal %s: skipping unreadable line %d", path, lineno)


def apply_entry(state: ServerState, entry: dict[str, Any]) -> None:
    op = entry["op"]
    if op == "register":
        state.register(
            entry["name"],
            entry.get("hardware_config"),
            ip_address=entry.get("ip_address", ""),
            port=entry.get("port", 0),
            poll_interval_seconds=entry.get("poll_interval_seconds", 1.0),
        )
    elif op == "enqueue":
        state.enqueue(TaskSpec.from_json(entry["spec"]))
    elif op == "deliver":
        assignment = state.dispatch(entry["device_name"])
        delivered = assignment["task_name"] if assignment else None
        if delivered != entry["task_name"]:
            log.warning("journal replay diverged: expected %s, delivered %s", entry["task_name"], delivered)
    elif op == "result":
        state.record_result(entry["device_name"], entry["task_name"], TaskResult.from_json(entry["result"]))
    elif op == "stop":
        state.stop(entry["task_name"])
    elif op == "expire":
        state.expire(entry["task_name"], force=True)
    else:
        log.warning("journal: unknown op %r", op)


def replay(path: str | os.PathLike[str], state: ServerState) -> int:
    """Rebuild ``state`` from a journal. Returns the number of entries applied."""
    if not Path(path).exists():
        return 0
    live_clock = state.clock
    clock = ManualClock()
    state.clock = clock
    applied = 0
    try:
        for entry in read_entries(path):
            clock.set(int(entry.get("at", 0)))
            try:
                apply_entry(state, entry)
            except ProtocolError as exc:
                log.warning("journal replay: %s failed: %s", entry.get("op"), exc)
                continue
            applied += 1
    finally:
        state.clock = live_clock
    return applied
