"""Shared helpers for the test suite: config writers, task registries, servers, workers."""

from __future__ import annotations

import json
import os
import subprocess
import sys
import threading
import time
from pathlib import Path
from typing import Any

from feddart.config import ServerConfig
from feddart.core import TaskKind, TaskResult, TaskSpec
from feddart.server.http import FeddartHTTPServer, build_server
from feddart.worker.runtime import WorkerContext

TESTS_DIR = Path(__file__).resolve().parent
KEY = "000"

# Device file in the documented format, including the "ipAdress" spelling.
TWO_CLIENTS = {
    "client1": {"ipAdress": "client", "port": 2883, "hardware_config": None},
    "client2": {"ipAdress": "client", "port": 2884, "hardware_config": None},
}


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))
    return path


def device_file(path: Path, names: list[str], **extra: Any) -> Path:
    entries = {
        name: {"ipAdress": "127.0.0.1", "port": 2880 + i, "hardware_config": None, **extra}
        for i, name in enumerate(names)
    }
    return write_json(path, entries)


def spec(name: str, devices: list[str] | dict, fn: str = "echo", *, wait: float = 60.0, kind=TaskKind.DEFAULT) -> TaskSpec:
    params = devices if isinstance(devices, dict) else {d: {"x": i} for i, d in enumerate(devices)}
    return TaskSpec(name, fn, params, kind, max_wait_seconds=wait)


def init_spec(name: str = "init", params: dict | None = None) -> TaskSpec:
    return TaskSpec(name, "init", {"*": params or {}}, TaskKind.INIT)


# ---------------------------------------------------------------- registries

def build_registry(context: WorkerContext) -> dict:
    """Deterministic toy functions used by runtime tests."""

    def init(params):
        context.state["initialized"] = True
        return {"initialized": True}

    def echo(params):
        return {"device": context.device_name, **params}

    def square(params):
        return {"result_0": params.get("x", 0) ** 2}

    def sleep(params):
        time.sleep(float(params.get("seconds", 0.1)))
        return {"slept": params.get("seconds", 0.1)}

    def fail(params):
        raise RuntimeError("boom")

    return {"init": init, "echo": echo, "square": square, "sleep": sleep, "fail": fail}


def slow_fact_registry(context: WorkerContext) -> dict:
    """FL functions whose learn is stretched so a round can be interrupted."""
    from feddart.fact.client import build_registry as fact_registry

    data = dict(context.data or {})
    delay = float(data.pop("learn_delay", 0.3))
    context.data = data or None
    registry = fact_registry(context)
    learn = registry["learn"]

    def slow_learn(params):
        time.sleep(delay)
        return learn(params)

    registry["learn"] = slow_learn
    return registry


# ------------------------------------------------------------------- servers

def start_http_server(capacity: int = 4, journal: str | None = None, **config: Any) -> FeddartHTTPServer:
    cfg = ServerConfig(server="http://127.0.0.1:0", client_key=KEY, capacity=capacity, journal=journal, **config)
    server = build_server(cfg, host="127.0.0.1", port=0)
    server.start_background()
    return server


def subprocess_env() -> dict[str, str]:
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join([str(TESTS_DIR), env.get("PYTHONPATH", "")])
    env.pop("FEDDART_KEY", None)
    return env


def spawn_worker(config_path: Path, log_path: Path | None = None) -> subprocess.Popen:
    out = open(log_path, "w") if log_path else subprocess.DEVNULL
    return subprocess.Popen(
        [sys.executable, "-m", "feddart", "--log-level", "warn", "worker", "--config", str(config_path)],
        env=subprocess_env(),
        stdout=out,
        stderr=subprocess.STDOUT if log_path else subprocess.DEVNULL,
    )


def wait_until(predicate, timeout: float = 10.0, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


class WorkerThread:
    """A worker daemon running in a thread of the test process."""

    def __init__(self, server_url: str, name: str, tmp: Path, *, registry: str = "support:build_registry",
                 data: dict | None = None, poll: float = 0.2) -> None:
        from feddart.worker.runtime import WorkerConfig, run_loop

        self.config = WorkerConfig(
            server_url=server_url, key=KEY, device_name=name, output_dir=str(tmp / name),
            poll_interval_seconds=poll, function_registry_ref=registry, data=data,
        )
        self.stop = threading.Event()
        self.executed: int | None = None
        self.thread = threading.Thread(target=self._run, args=(run_loop,), daemon=True)

    def _run(self, run_loop) -> None:
        self.executed = run_loop(self.config, stop=self.stop)

    def start(self) -> WorkerThread:
        self.thread.start()
        return self

    def close(self, timeout: float = 10.0) -> None:
        self.stop.set()
        self.thread.join(timeout)


# --------------------------------------------------------------- experiments

def experiment_files(tmp: Path, names: list[str], *, url: str = "https://127.0.0.1:7777", **overrides: Any) -> Path:
    """Server file, device file and experiment config for a small synthetic linear task."""
    write_json(tmp / "server.json", {"server": url, "client_key": KEY})
    device_file(tmp / "devices.json", names)
    config = {
        "server_file": "server.json",
        "device_file": "devices.json",
        "model": {
            "model_type": "linear",
            "model_config": {"n_features": 3},
            "hyperparameters": {"learning_rate": 0.1, "local_epochs": 2, "batch_size": 16},
        },
        "aggregation": "WEIGHTED_FEDAVG",
        "clustering": {"algorithm": "STATIC", "k": 1},
        "fl_rounds": 3,
        "clustering_rounds": 1,
        "data": {"synthetic": {"n_samples": 80, "n_features": 3, "weights": [1.0, -2.0, 0.5], "bias": 0.3, "noise": 0.1}},
        "seed": 7,
        "test_mode": True,
        "output_dir": "out",
        "max_wait_seconds": 30,
    }
    config.update(overrides)
    return write_json(tmp / "experiment.json", config)


# ------------------------------------------------------- state schedules

def finish(st, device, task, **result):
    return st.record_result(device, task, TaskResult.build(device, 0.01, result or {"ok": 1}))


def random_schedule(rng, st, devices, steps):
    """Drive the state with a random interleaving of joins, polls, submits and new tasks."""
    events = []
    delivered = {}
    counter = 0
    for _ in range(steps):
        op = rng.random()
        if op < 0.1:
            name = f"d{len(st.devices)}"
            st.register(name)
            devices.append(name)
        elif op < 0.3 and devices:
            counter += 1
            targets = rng.sample(devices, rng.randint(1, len(devices)))
            st.enqueue(spec(f"t{counter}", targets))
        elif op < 0.7 and devices:
            d = rng.choice(devices)
            if d in delivered:
                continue
            a = st.dispatch(d)
            if a is not None:
                events.append((d, a["task_kind"], a["task_name"]))
                delivered[d] = a["task_name"]
        elif delivered:
            d = rng.choice(sorted(delivered))
            finish(st, d, delivered.pop(d))
    return events
