import json
import threading
import time
import urllib.request

import pytest

from feddart.core import TaskResult, TaskState
from feddart.protocol import AUTH_HEADER, ErrorCode, HttpApiClient, ProtocolError, TransportError
from feddart.server.app import ServerApp
from support import KEY, init_spec, spec, start_http_server


@pytest.fixture
def client(http_server):
    return HttpApiClient(http_server.url, KEY)


def register(client, *names):
    for n in names:
        client.register_device(n, None, ip_address="client", port=2883)


def raw(url, method="GET", body=None, key=KEY, headers=None):
    req = urllib.request.Request(url, data=body, method=method)
    if key is not None:
        req.add_header(AUTH_HEADER, key)
    for k, v in (headers or {}).items():
        req.add_header(k, v)
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_add_task_and_list_devices(client):
    register(client, "client1", "client2")
    assert [d["name"] for d in client.list_devices()] == ["client1", "client2"]
    handle = client.add_task("job", spec("job", ["client1", "client2"]))
    assert handle.task_name == "job"


def test_add_task_rejections(client):
    register(client, "client1")
    with pytest.raises(ProtocolError) as ghost:
        client.add_task("g", spec("g", ["ghost"]))
    assert ghost.value.code is ErrorCode.TASK_REJECTED
    client.add_task("j", spec("j", ["client1"]))
    with pytest.raises(ProtocolError) as dup:
        client.add_task("j", spec("j", ["client1"]))
    assert dup.value.code is ErrorCode.TASK_REJECTED


def test_status_results_and_stop(client):
    register(client, "a", "b", "c")
    client.add_task("t", spec("t", ["a", "b", "c"]))
    for d in ("a", "b"):
        assert client.poll_assignment(d)["task_name"] == "t"
        assert client.submit_result(d, "t", TaskResult.build(d, 0.2, {"result_0": 5, "result_1": 2}))
    status = client.get_task_status("t")
    assert status.state is TaskState.PARTIAL and status.pending_devices == {"c"}
    results = client.get_job_results("t", 10)
    assert len(results) == 2 and results[0].resultList == [5, 2]
    assert len(client.get_job_results("t", 1)) == 1
    assert client.stop_task("t")
    assert client.get_task_status("t").state is TaskState.STOPPED
    with pytest.raises(ProtocolError) as unknown:
        client.get_job_results("nope", 1)
    assert unknown.value.code is ErrorCode.TASK_UNKNOWN


def test_fresh_task_is_queued_when_over_capacity():
    server = start_http_server(capacity=1)
    try:
        c = HttpApiClient(server.url, KEY)
        register(c, "a")
        c.add_task("A", spec("A", ["a"]))
        c.add_task("B", spec("B", ["a"]))
        assert c.get_task_status("B").state is TaskState.QUEUED
    finally:
        server.close()


def test_worker_side_errors(client):
    register(client, "a")
    client.add_task("t", spec("t", ["a"]))
    with pytest.raises(ProtocolError) as not_open:
        client.submit_result("a", "t", TaskResult.build("a", 0, {}))
    assert not_open.value.code is ErrorCode.TASK_UNKNOWN
    with pytest.raises(ProtocolError) as who:
        client.poll_assignment("ghost")
    assert who.value.code is ErrorCode.DEVICE_UNKNOWN
    client.poll_assignment("a")
    client.submit_result("a", "t", TaskResult.build("a", 0, {}))
    with pytest.raises(ProtocolError) as dup:
        client.submit_result("a", "t", TaskResult.build("a", 0, {}))
    assert dup.value.code is ErrorCode.BAD_REQUEST


def test_empty_poll_waits_then_returns_none(client):
    register(client, "a")
    started = time.monotonic()
    assert client.poll_assignment("a", 0.1) is None
    assert 0.09 <= time.monotonic() - started < 2


def test_long_poll_wakes_on_new_task(client):
    register(client, "a")
    got = {}
    t = threading.Thread(target=lambda: got.setdefault("a", client.poll_assignment("a", 5)))
    t.start()
    time.sleep(0.2)
    started = time.monotonic()
    client.add_task("t", spec("t", ["a"]))
    t.join(5)
    assert got["a"]["task_name"] == "t"
    assert time.monotonic() - started < 1


def test_init_params_are_broadcast(client):
    register(client, "client1")
    client.add_task("init", init_spec("init", {"model_structure": [3, 1]}))
    a = client.poll_assignment("client1")
    assert a["task_kind"] == "INIT" and a["params"] == {"model_structure": [3, 1]}


def test_unauthorized(http_server):
    status, body = raw(http_server.url + "/api/devices", key="wrong")
    assert status == 401 and body["error"]["code"] == "UNAUTHORIZED"
    status, body = raw(http_server.url + "/api/devices", key=None)
    assert status == 401
    with pytest.raises(ProtocolError) as exc:
        HttpApiClient(http_server.url, "wrong").list_devices()
    assert exc.value.code is ErrorCode.UNAUTHORIZED


def test_bad_requests(http_server):
    status, body = raw(http_server.url + "/api/tasks", "POST", b"{not json")
    assert status == 400 and body["error"]["code"] == "BAD_REQUEST"
    status, body = raw(http_server.url + "/api/tasks", "POST", b'{"job_name": "x"}')
    assert status == 400
    status, body = raw(http_server.url + "/api/nowhere")
    assert status == 400
    assert body["ok"] is False and body["data"] is None


def test_payload_too_large():
    server = start_http_server(max_payload_bytes=1024)
    try:
        status, body = raw(server.url + "/api/tasks", "POST", b"x" * 2048)
        assert status == 413 and body["error"]["code"] == "PAYLOAD_TOO_LARGE"
        app = ServerApp(KEY, max_payload_bytes=10)
        status, env = app.handle("POST", "/api/tasks", {AUTH_HEADER: KEY}, b"y" * 11)
        assert status == 413
        app.shutdown()
    finally:
        server.close()


def test_task_names_with_special_characters(client):
    register(client, "a")
    name = "run 1/cluster#0?r=1"
    client.add_task(name, spec(name, ["a"]))
    assert client.get_task_status(name).state is TaskState.RUNNING


def test_unreachable_server():
    with pytest.raises(TransportError):
        HttpApiClient("http://127.0.0.1:9", KEY, timeout=1).list_devices()


def test_envelope_shape(http_server):
    status, body = raw(http_server.url + "/api/devices")
    assert status == 200 and body == {"ok": True, "error": None, "data": []}
