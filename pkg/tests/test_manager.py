import pytest

from feddart.core import ManualClock, TaskState
from feddart.manager import WorkflowError, WorkflowManager
from feddart.protocol import HttpApiClient
from feddart.server.app import ServerApp
from feddart.server.state import ServerState
from feddart.worker.runtime import Worker, WorkerContext
from support import KEY, build_registry, write_json


def toy_factory(tmp_path):
    def factory(device):
        ctx = WorkerContext(device.name, str(tmp_path / device.name))
        return Worker(ctx, build_registry(ctx))

    return factory


@pytest.fixture
def manager(tmp_path, documented_configs):
    server_file, device_file = documented_configs
    wm = WorkflowManager(test_mode=True, worker_factory=toy_factory(tmp_path))
    wm.create_init_task({"model_structure": [3, 1]}, "init")
    wm.start_fed_dart(server_file, device_file)
    yield wm
    wm.close()


def test_test_mode_initializes_listed_clients(manager):
    assert manager.get_all_device_names() == ["client1", "client2"]
    devices = manager.runtime.update_registered_devices()
    assert all(d["initialized"] for d in devices)
    init = manager.runtime.client.app.state.init_task
    results = manager.runtime.get_task_results(init)
    assert sorted(r.device_name for r in results) == ["client1", "client2"]


def test_start_task_and_collect(manager):
    handle = manager.start_task({"client1": {"x": 2, "epochs": 10}, "client2": {"x": 3}}, "square")
    status = manager.wait_for_task(handle, 5)
    assert status.state is TaskState.COMPLETED
    results = sorted(manager.get_task_result(handle), key=lambda r: r.deviceName)
    assert [r.resultList for r in results] == [[4], [9]]
    assert all(r.duration >= 0 for r in results)


def test_results_grow_monotonically(manager):
    handle = manager.start_task({"client1": {"seconds": 0.2}, "client2": {"seconds": 0.2}}, "sleep")
    seen = []
    while True:
        current = {r.device_name for r in manager.get_task_result(handle)}
        assert all(prev <= current for prev in seen)
        seen.append(current)
        if manager.get_task_status(handle).state.terminal:
            break
    assert len(manager.get_task_result(handle)) == 2


def test_stop_freezes_results(manager):
    handle = manager.start_task({"client1": {"seconds": 0.3}, "client2": {"seconds": 0.3}}, "sleep")
    assert manager.stop_task(handle)
    frozen = manager.get_task_result(handle)
    import time

    time.sleep(0.8)
    assert manager.get_task_result(handle) == frozen
    assert manager.get_task_status(handle).state is TaskState.STOPPED


def test_rejections(manager):
    with pytest.raises(WorkflowError) as exc:
        manager.start_task({"ghost": {}}, "square")
    assert exc.value.code == "TASK_REJECTED"
    with pytest.raises(WorkflowError) as again:
        manager.create_init_task({}, "init")
    assert again.value.code == "ALREADY_CONNECTED"


def test_not_connected():
    with pytest.raises(WorkflowError) as exc:
        WorkflowManager().start_task({"client1": {}}, "learn")
    assert exc.value.code == "NOT_CONNECTED"


def test_second_init_task_replaces_first():
    wm = WorkflowManager(test_mode=True)
    wm.create_init_task({"v": 1})
    wm.create_init_task({"v": 2})
    assert wm.init_task.params_for("client1") == {"v": 2}


def test_unreachable_server_fails_to_connect(tmp_path):
    server = write_json(tmp_path / "server.json", {"server": "http://127.0.0.1:9", "client_key": KEY})
    wm = WorkflowManager()
    with pytest.raises(WorkflowError) as exc:
        wm.start_fed_dart(server)
    assert exc.value.code == "CONNECT_FAILED"


def test_bad_config_fails_to_connect(tmp_path):
    with pytest.raises(WorkflowError) as exc:
        WorkflowManager().start_fed_dart(tmp_path / "missing.json")
    assert exc.value.code == "CONNECT_FAILED"


def test_init_timeout_names_missing_clients(tmp_path, documented_configs):
    server_file, device_file = documented_configs
    wm = WorkflowManager(test_mode=True, init_timeout=0.3)  # no simulated workers: nobody answers
    wm.create_init_task({})
    with pytest.raises(WorkflowError) as exc:
        wm.start_fed_dart(server_file, device_file)
    assert exc.value.code == "INIT_TIMEOUT" and "client1" in exc.value.message
    wm.close()


def test_no_devices_gives_empty_name_list(tmp_path, http_server):
    server = write_json(tmp_path / "server.json", {"server": http_server.url, "client_key": KEY})
    wm = WorkflowManager()
    wm.start_fed_dart(server)
    assert wm.get_all_device_names() == []


def test_heartbeat_lapse_drops_device_name(tmp_path, http_server):
    clock = ManualClock(0)
    old = http_server.app
    http_server.app = ServerApp(KEY, state=ServerState(clock=clock))
    old.shutdown()
    api = HttpApiClient(http_server.url, KEY)
    api.register_device("client1", poll_interval_seconds=1.0)
    api.register_device("client2", poll_interval_seconds=1.0)
    server = write_json(tmp_path / "server.json", {"server": http_server.url, "client_key": KEY})
    wm = WorkflowManager()
    wm.start_fed_dart(server)
    assert wm.get_all_device_names() == ["client1", "client2"]
    clock.advance(2.5)
    api.poll_assignment("client1")
    clock.advance(2.5)
    assert wm.get_all_device_names() == ["client1"]
