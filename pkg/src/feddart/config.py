"""Loaders for the server configuration and device configuration files.

Server file::

    {"server": "https://dart-server:7777", "client_key": "000"}

Device file (field spelling ``ipAdress`` is the established one; ``ipAddress``
is accepted too)::

    {"client1": {"ipAdress": "client", "port": 2883, "hardware_config": null}}
"""

from __future__ import annotations

import json
import os
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from feddart.core import DEFAULT_MAX_PAYLOAD_BYTES
from feddart.server.state import DEFAULT_CAPACITY

KEY_ENV_VAR = "FEDDART_KEY"


class ConfigError(ValueError):
    pass


def read_json(path: str | os.PathLike[str]) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


@dataclass
class ServerConfig:
    server: str
    client_key: str
    capacity: int = DEFAULT_CAPACITY
    max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES
    journal: str | None = None
    log_file: str | None = None
    bind_host: str | None = None

    @property
    def host(self) -> str:
        return urllib.parse.urlsplit(self.server).hostname or "127.0.0.1"

    @property
    def port(self) -> int:
        parsed = urllib.parse.urlsplit(self.server)
        if parsed.port is not None:
            return parsed.port
        return 443 if parsed.scheme == "https" else 80

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], *, env: Mapping[str, str] | None = None) -> ServerConfig:
        env = os.environ if env is None else env
        if "server" not in data:
            raise ConfigError("server config needs a 'server' entry")
        url = str(data["server"])
        if urllib.parse.urlsplit(url).scheme not in ("http", "https"):
            raise ConfigError(f"server URL must be http(s): {url!r}")
        key = env.get(KEY_ENV_VAR) or data.get("client_key")
        if key is None:
            raise ConfigError("server config needs a 'client_key' entry")
        capacity = int(data.get("capacity", DEFAULT_CAPACITY))
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        return cls(
            server=url,
            client_key=str(key),
            capacity=capacity,
            max_payload_bytes=int(data.get("max_payload_bytes", DEFAULT_MAX_PAYLOAD_BYTES)),
            journal=data.get("journal"),
            log_file=data.get("log_file"),
            bind_host=data.get("bind_host"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> ServerConfig:
        data = read_json(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_mapping(data)


@dataclass
class DeviceConfig:
    name: str
    ip_address: str
    port: int
    hardware_config: dict[str, Any] | None = None
    # Optional local-data spec, used by simulated devices in test mode.
    data: dict[str, Any] | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def parse_device_config(data: Mapping[str, Any]) -> dict[str, DeviceConfig]:
    if not isinstance(data, Mapping):
        raise ConfigError("device config must be a JSON object keyed by device name")
    devices = {}
    for name, entry in data.items():
        if not isinstance(entry, Mapping):
            raise ConfigError(f"device {name!r}: expected an object")
        address = entry.get("ipAdress", entry.get("ipAddress"))
        missing = [k for k, present in (("ipAdress", address is not None), ("port", "port" in entry),
                                        ("hardware_config", "hardware_config" in entry)) if not present]
        if missing:
            raise ConfigError(f"device {name!r}: missing {', '.join(missing)}")
        hardware = entry["hardware_config"]
        if hardware is not None and not isinstance(hardware, Mapping):
            raise ConfigError(f"device {name!r}: hardware_config must be an object or null")
        known = {"ipAdress", "ipAddress", "port", "hardware_config", "data"}
        devices[name] = DeviceConfig(
            name=name,
            ip_address=str(address),
            port=int(entry["port"]),
            hardware_config=dict(hardware) if hardware is not None else None,
            data=entry.get("data"),
            extra={k: v for k, v in entry.items() if k not in known},
        )
    return devices


def load_device_config(path: str | os.PathLike[str]) -> dict[str, DeviceConfig]:
    return parse_device_config(read_json(path))


def resolve_path(base: str | os.PathLike[str], value: str | None) -> str | None:
    """Resolve ``value`` relative to the directory holding ``base``."""
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else Path(base).parent / p)
