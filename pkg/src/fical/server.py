"""HTTP front end for :class:`~fical.federation.FederationServer`.

Routes:

``POST /v1/compendium``
    body is a canonical compendium document; answers a JSON receipt.
``GET /v1/global``
    the global compendium document, or 409 while still collecting.
``GET /v1/status``
    ``{"registered": n, "received": m, "state": "collecting" | "aggregated"}``
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable

from .errors import DuplicateClient, NotAggregated, UploadRejected
from .federation import FederationServer

log = logging.getLogger(__name__)

MAX_UPLOAD_BYTES = 16 * 1024 * 1024


class _Handler(BaseHTTPRequestHandler):
    server: FederationHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, status: int, obj: dict) -> None:
        self._send(status, json.dumps(obj, sort_keys=True).encode(), "application/json")

    def do_GET(self) -> None:  # noqa: N802
        fed = self.server.federation
        if self.path == "/v1/status":
            self._json(200, fed.status())
        elif self.path == "/v1/global":
            try:
                body = fed.global_bytes()
            except NotAggregated as exc:
                self._json(409, {"error": "NotAggregated", "reason": str(exc), **fed.status()})
                return
            self._send(200, body, "text/markdown; charset=utf-8")
        else:
            self._json(404, {"error": "NotFound", "path": self.path})

    def do_POST(self) -> None:  # noqa: N802
        if self.path != "/v1/compendium":
            self._json(404, {"error": "NotFound", "path": self.path})
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length <= 0 or length > MAX_UPLOAD_BYTES:
            self._json(400, {"error": "BadRequest", "reason": f"bad Content-Length {length}"})
            return
        payload = self.rfile.read(length)
        client_id = self.headers.get("X-Fical-Client-Id")
        try:
            receipt = self.server.federation.receive(payload, client_id)
        except DuplicateClient as exc:
            self._json(409, {"error": "DuplicateClient", "client_id": exc.client_id})
            return
        except UploadRejected as exc:
            self._json(422, {"error": "UploadRejected", "client_id": exc.client_id, "reason": exc.reason})
            return
        self._json(
            200,
            {
                "client_id": receipt.client_id,
                "bytes": receipt.bytes,
                "received": receipt.received,
                "registered": receipt.registered,
            },
        )


class FederationHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], federation: FederationServer) -> None:
        self.federation = federation
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"


def make_server(registered: Iterable[str], host: str = "127.0.0.1", port: int = 0) -> FederationHTTPServer:
    return FederationHTTPServer((host, port), FederationServer(registered))


def serve_in_background(server: FederationHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, name="fical-http", daemon=True)
    thread.start()
    return thread
