import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from support import KEY, TWO_CLIENTS, start_http_server, write_json  # noqa: E402

# Generation speed varies a lot on shared CI machines; timing is not what these tests check.
settings.register_profile("feddart", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("feddart")


@pytest.fixture
def http_server():
    server = start_http_server()
    yield server
    server.close()


@pytest.fixture
def documented_configs(tmp_path):
    """Server file with the documented test-mode URL plus the two-client device file."""
    server = write_json(tmp_path / "server.json", {"server": "https://127.0.0.1:7777", "client_key": KEY})
    devices = write_json(tmp_path / "devices.json", TWO_CLIENTS)
    return server, devices
