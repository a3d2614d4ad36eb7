"""HTTP front end for :class:`ServerApp`."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from feddart.config import ServerConfig
from feddart.protocol import ErrorCode, error_envelope
from feddart.server.app import ServerApp
from feddart.server.journal import Journal, replay
from feddart.server.state import ServerState

log = logging.getLogger("feddart.server.http")


class _Handler(BaseHTTPRequestHandler):
    server: FeddartHTTPServer
    protocol_version = "HTTP/1.1"

    def _serve(self) -> None:
        app = self.server.app
        length = int(self.headers.get("Content-Length") or 0)
        if length > app.max_payload_bytes:
            self._reply(413, error_envelope(ErrorCode.PAYLOAD_TOO_LARGE, f"body exceeds {app.max_payload_bytes} bytes"))
            self.close_connection = True
            return
        body = self.rfile.read(length) if length else None
        status, envelope = app.handle(self.command, self.path, self.headers, body)
        self._reply(status, envelope)

    def _reply(self, status: int, envelope: dict) -> None:
        payload = json.dumps(envelope, allow_nan=False).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_DELETE = _serve

    def log_message(self, format: str, *args) -> None:  # noqa: A002
        log.debug("%s %s", self.address_string(), format % args)


class FeddartHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], app: ServerApp) -> None:
        self.app = app
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, args=(0.05,), name="feddart-http", daemon=True)
        thread.start()
        return thread

    def close(self) -> None:
        self.shutdown()
        self.server_close()
        self.app.shutdown()


def build_server(config: ServerConfig, *, host: str | None = None, port: int | None = None) -> FeddartHTTPServer:
    state = ServerState(capacity=config.capacity)
    journal = None
    if config.journal:
        applied = replay(config.journal, state)
        if applied:
            log.info("journal replayed entries=%d path=%s", applied, config.journal)
        journal = Journal(config.journal)
    app = ServerApp(config.client_key, state=state, journal=journal, max_payload_bytes=config.max_payload_bytes)
    bind_host = host or config.bind_host or config.host
    bind_port = config.port if port is None else port
    return FeddartHTTPServer((bind_host, bind_port), app)
