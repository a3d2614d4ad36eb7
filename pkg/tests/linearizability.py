"""Sequential reference model of the task server plus a WGL linearizability checker.

The model is written from the protocol rules, not from the server code: a
dictionary of tasks, a FIFO admission queue, an init gate and per-device
delivery bookkeeping. Time never advances in these schedules (tasks get a huge
max_wait), so expiry and heartbeats are out of the picture.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Any

from feddart.core import TaskKind, TaskResult, TaskSpec
from feddart.protocol import ApiClient, ProtocolError, RESULT_PATH, task_path, unwrap
from feddart.server.app import ServerApp
from feddart.server.state import ServerState
from support import KEY

NO_EXPIRY = 3600.0


class ReferenceServer:
    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self.devices: list[str] = []
        self.initialized: set[str] = set()
        self.open: dict[str, set[str]] = {}
        self.done: dict[str, set[str]] = {}
        # name -> [kind, targets, started, stopped, delivered, finished (ordered)]
        self.tasks: dict[str, list] = {}
        self.order: list[str] = []
        self.queue: list[str] = []
        self.init_name: str | None = None

    def copy(self) -> ReferenceServer:
        other = ReferenceServer.__new__(ReferenceServer)
        other.capacity = self.capacity
        other.devices = list(self.devices)
        other.initialized = set(self.initialized)
        other.open = {d: set(s) for d, s in self.open.items()}
        other.done = {d: set(s) for d, s in self.done.items()}
        other.tasks = {n: [t[0], t[1], t[2], t[3], set(t[4]), list(t[5])] for n, t in self.tasks.items()}
        other.order = list(self.order)
        other.queue = list(self.queue)
        other.init_name = self.init_name
        return other

    def key(self) -> tuple:
        return (
            tuple(self.devices),
            frozenset(self.initialized),
            tuple(sorted((d, frozenset(s)) for d, s in self.open.items())),
            tuple(sorted((n, t[2], t[3], frozenset(t[4]), tuple(t[5])) for n, t in self.tasks.items())),
            tuple(self.queue),
            self.init_name,
        )

    # -------------------------------------------------------------- helpers

    def _targets(self, name: str) -> set[str]:
        kind, targets = self.tasks[name][0], self.tasks[name][1]
        return set(self.devices) if kind == "INIT" else set(targets)

    def _state(self, name: str) -> tuple[str, frozenset, frozenset]:
        kind, _, started, stopped, _, finished = self.tasks[name]
        finished_set = frozenset(finished)
        pending = frozenset() if stopped else frozenset(self._targets(name) - finished_set)
        if stopped:
            state = "STOPPED"
        elif not started:
            state = "QUEUED"
        elif finished_set and not pending:
            state = "COMPLETED"
        elif finished_set:
            state = "PARTIAL"
        else:
            state = "RUNNING"
        return state, finished_set, pending

    def _terminal(self, name: str) -> bool:
        return self._state(name)[0] in ("COMPLETED", "STOPPED")

    def _admit(self) -> None:
        def running() -> int:
            return sum(1 for n, t in self.tasks.items() if t[0] == "DEFAULT" and t[2] and not self._terminal(n))

        while self.queue and running() < self.capacity:
            self.tasks[self.queue.pop(0)][2] = True

    # ----------------------------------------------------------- operations

    def apply(self, op: tuple) -> Any:
        return getattr(self, "op_" + op[0])(*op[1:])

    def op_register(self, device: str) -> Any:
        if device not in self.devices:
            self.devices.append(device)
            self.open[device] = set()
            self.done[device] = set()
        return ("ok", True)

    def op_add(self, name: str, targets: tuple, kind: str) -> Any:
        if name in self.tasks:
            return ("err", "TASK_REJECTED")
        if kind == "INIT":
            if self.init_name is not None:
                return ("err", "TASK_REJECTED")
        elif any(t not in self.devices for t in targets):
            return ("err", "TASK_REJECTED")
        self.tasks[name] = [kind, tuple(targets), kind == "INIT", False, set(), []]
        self.order.append(name)
        if kind == "INIT":
            self.init_name = name
        else:
            self.queue.append(name)
            self._admit()
        return ("ok", True)

    def op_poll(self, device: str) -> Any:
        if device not in self.devices:
            return ("err", "DEVICE_UNKNOWN")
        if self.init_name is not None and device not in self.initialized:
            init = self.tasks[self.init_name]
            if device in init[4]:
                return ("ok", None)
            init[4].add(device)
            self.open[device].add(self.init_name)
            return ("ok", self.init_name)
        for name in self.order:
            kind, targets, started, stopped, delivered, _ = self.tasks[name]
            if kind == "DEFAULT" and started and not stopped and device in targets and device not in delivered:
                delivered.add(device)
                self.open[device].add(name)
                return ("ok", name)
        return ("ok", None)

    def op_submit(self, device: str, name: str) -> Any:
        if device not in self.devices:
            return ("err", "DEVICE_UNKNOWN")
        if name not in self.tasks:
            return ("err", "TASK_UNKNOWN")
        task = self.tasks[name]
        if device in task[5] or name in self.done[device]:
            return ("err", "BAD_REQUEST")
        if name not in self.open[device]:
            return ("err", "TASK_UNKNOWN")
        self.open[device].discard(name)
        self.done[device].add(name)
        if task[3]:
            return ("ok", self._state(name)[0])
        task[5].append(device)
        if task[0] == "INIT":
            self.initialized.add(device)
        state = self._state(name)[0]
        if state in ("COMPLETED", "STOPPED"):
            self._admit()
        return ("ok", state)

    def op_status(self, name: str) -> Any:
        if name not in self.tasks:
            return ("err", "TASK_UNKNOWN")
        return ("ok", self._state(name))

    def op_results(self, name: str) -> Any:
        if name not in self.tasks:
            return ("err", "TASK_UNKNOWN")
        return ("ok", tuple(self.tasks[name][5]))

    def op_stop(self, name: str) -> Any:
        if name not in self.tasks:
            return ("err", "TASK_UNKNOWN")
        if self._terminal(name):
            return ("ok", False)
        self.tasks[name][3] = True
        if name in self.queue:
            self.queue.remove(name)
        if self.init_name == name:
            self.init_name = None
        self._admit()
        return ("ok", True)


# ------------------------------------------------------------------ checker

@dataclass(frozen=True)
class Event:
    process: int
    invoked: int
    returned: int
    op: tuple
    output: Any


def linearizable(history: list[Event], initial: ReferenceServer) -> bool:
    """Wing-Gong search with memoisation on (linearized set, model state)."""
    events = sorted(history, key=lambda e: e.invoked)
    full = (1 << len(events)) - 1
    seen: set[tuple[int, tuple]] = set()

    def search(done: int, model: ReferenceServer) -> bool:
        if done == full:
            return True
        pending = [i for i in range(len(events)) if not done & (1 << i)]
        horizon = min(events[i].returned for i in pending)
        for i in pending:
            event = events[i]
            if event.invoked > horizon:
                break
            candidate = model.copy()
            if candidate.apply(event.op) != event.output:
                continue
            state = (done | (1 << i), candidate.key())
            if state in seen:
                continue
            seen.add(state)
            if search(done | (1 << i), candidate):
                return True
        return False

    return search(0, initial.copy())


# ----------------------------------------------------------- live schedules

class Recorder:
    """Runs operations against a live server and records timed events."""

    def __init__(self, client: ApiClient) -> None:
        self.client = client
        self.events: list[Event] = []
        self.lock = threading.Lock()

    def run(self, process: int, op: tuple) -> Any:
        invoked = time.perf_counter_ns()
        try:
            output = ("ok", self._send(op))
        except ProtocolError as exc:
            output = ("err", exc.code.value)
        returned = time.perf_counter_ns()
        with self.lock:
            self.events.append(Event(process, invoked, returned, op, output))
        return output

    def _send(self, op: tuple) -> Any:
        c = self.client
        kind = op[0]
        if kind == "register":
            return c.register_device(op[1], poll_interval_seconds=60.0)
        if kind == "add":
            _, name, targets, task_kind = op
            params = {"*": {}} if task_kind == "INIT" else {t: {"x": 1} for t in targets}
            c.add_task(name, TaskSpec(name, "echo", params, TaskKind(task_kind), max_wait_seconds=NO_EXPIRY))
            return True
        if kind == "poll":
            assignment = c.poll_assignment(op[1], 0.0)
            return None if assignment is None else assignment["task_name"]
        if kind == "submit":
            body = {"device_name": op[1], "task_name": op[2],
                    "result": TaskResult.build(op[1], 0.0, {"x": 1}).to_json()}
            return unwrap(c.send("POST", RESULT_PATH, body))["status"]["state"]
        if kind == "status":
            s = c.get_task_status(op[1])
            return s.state.value, frozenset(s.finished_devices), frozenset(s.pending_devices)
        if kind == "results":
            found = unwrap(c.send("GET", task_path(op[1], "/results")))
            return tuple(r["device_name"] for r in found)
        if kind == "stop":
            return c.stop_task(op[1])
        raise ValueError(kind)


def fresh_app(capacity: int) -> ServerApp:
    return ServerApp(KEY, state=ServerState(capacity=capacity))


def run_schedule(server, client: ApiClient, seed: int) -> tuple[bool, list[Event], int]:
    """One randomized concurrent schedule against ``server`` (an HTTP server whose app is replaced)."""
    rng = random.Random(seed)
    capacity = rng.randint(1, 2)
    old, server.app = server.app, fresh_app(capacity)
    old.shutdown()
    recorder = Recorder(client)
    devices = [f"d{i}" for i in range(rng.randint(2, 3))]
    registered = devices[: rng.randint(1, len(devices))]
    for d in registered:
        recorder.run(0, ("register", d))
    if rng.random() < 0.5:
        recorder.run(0, ("add", "init", (), "INIT"))

    names = [f"t{i}" for i in range(1, 4)]

    def manager_ops(r: random.Random) -> list[tuple]:
        ops = []
        for name in names:
            ops.append(("add", name, tuple(r.sample(devices, r.randint(1, len(devices)))), "DEFAULT"))
            ops.append(r.choice([("status", r.choice(names)), ("results", r.choice(names)), ("stop", r.choice(names + ["nope"]))]))
        return ops

    def device_loop(process: int, device: str, r: random.Random) -> None:
        if device not in registered:
            time.sleep(r.random() * 0.002)
            recorder.run(process, ("register", device))
        for _ in range(r.randint(2, 4)):
            got = recorder.run(process, ("poll", device))
            if got[0] == "ok" and got[1] is not None:
                recorder.run(process, ("submit", device, got[1]))
                if r.random() < 0.1:
                    recorder.run(process, ("submit", device, got[1]))
            elif r.random() < 0.2:
                recorder.run(process, ("submit", device, r.choice(names)))

    barrier = threading.Barrier(len(devices) + 1)

    def manager_thread(r: random.Random) -> None:
        barrier.wait()
        for op in manager_ops(r):
            recorder.run(1, op)

    def device_thread(process: int, device: str, r: random.Random) -> None:
        barrier.wait()
        device_loop(process, device, r)

    threads = [threading.Thread(target=manager_thread, args=(random.Random(rng.random()),))]
    threads += [
        threading.Thread(target=device_thread, args=(2 + i, d, random.Random(rng.random())))
        for i, d in enumerate(devices)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return linearizable(recorder.events, ReferenceServer(capacity)), recorder.events, capacity


def describe(events: list[Event]) -> str:
    lines = [f"p{e.process} [{e.invoked}..{e.returned}] {e.op} -> {e.output}" for e in sorted(events, key=lambda e: e.invoked)]
    return "\n".join(lines)


__all__ = ["Event", "Recorder", "ReferenceServer", "describe", "linearizable", "run_schedule"]
