"""JSON-over-HTTP front end for :class:`SlateService` (stdlib server).

Endpoints::

    GET  /v1/carousel?user=<id>&policy=<p>[&now=<ts>]   -> Slate document
    GET  /v1/view-all?user=<id>&policy=<p>[&now=<ts>]   -> Slate document
    POST /v1/feedback {"slate_id": ..., "click_position": n|null}  -> 204
    GET  /v1/health                                     -> version info

Errors come back as ``{"error": message}`` with status 400 (bad input),
404 (unknown slate or path) or 503 (no serving snapshot yet).
"""
from __future__ import annotations

import json
import logging
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional
from urllib.parse import parse_qs, urlsplit

from .slate_service import Policy, SlateService, UnknownSlateError

_logger = logging.getLogger(__name__)

MAX_BODY = 64 * 1024


class _Handler(BaseHTTPRequestHandler):
    server: "ApiServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route access logs through logging
        _logger.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body=None) -> None:
        data = b"" if body is None else json.dumps(body, sort_keys=True).encode()
        self.send_response(status)
        if body is not None:
            self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if data:
            self.wfile.write(data)

    def _error(self, status: int, message: str) -> None:
        self._send(status, {"error": message})

    def do_GET(self):
        url = urlsplit(self.path)
        if url.path == "/v1/health":
            return self._send(200, self.server.service.health())
        if url.path not in ("/v1/carousel", "/v1/view-all"):
            return self._error(404, f"no route {url.path}")
        q = {k: v[-1] for k, v in parse_qs(url.query).items()}
        user = q.get("user")
        if not user:
            return self._error(400, "missing 'user'")
        try:
            policy = Policy(q.get("policy", Policy.COLD_START.value))
        except ValueError:
            return self._error(400, f"unknown policy {q.get('policy')!r}")
        try:
            now = int(q["now"]) if "now" in q else self.server.clock()
        except ValueError:
            return self._error(400, "'now' must be an integer timestamp")
        svc = self.server.service
        try:
            if url.path == "/v1/carousel":
                slate = svc.build_carousel(user, now, policy)
            else:
                slate = svc.view_all(user, now, policy)
        except RuntimeError as exc:
            return self._error(503, str(exc))
        self._send(200, slate.to_dict())

    def do_POST(self):
        url = urlsplit(self.path)
        if url.path != "/v1/feedback":
            return self._error(404, f"no route {url.path}")
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            return self._error(400, "bad Content-Length")
        if not 0 < length <= MAX_BODY:
            return self._error(400, "body required (at most 64 KiB)")
        try:
            body = json.loads(self.rfile.read(length))
        except (ValueError, UnicodeDecodeError):
            return self._error(400, "body is not JSON")
        if not isinstance(body, dict) or not isinstance(body.get("slate_id"), str):
            return self._error(400, "expected an object with a string 'slate_id'")
        click = body.get("click_position")
        if click is not None and (isinstance(click, bool) or not isinstance(click, int)):
            return self._error(400, "'click_position' must be an integer or null")
        try:
            self.server.service.record_display(body["slate_id"], click, self.server.clock())
        except UnknownSlateError:
            return self._error(404, f"unknown slate {body['slate_id']!r}")
        except ValueError as exc:
            return self._error(400, str(exc))
        self._send(204)


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: SlateService, clock: Optional[Callable[[], int]] = None):
        super().__init__(address, _Handler)
        self.service = service
        self.clock = clock or (lambda: int(time.time()))


def serve_in_thread(service: SlateService, host: str = "127.0.0.1", port: int = 0,
                    clock: Optional[Callable[[], int]] = None) -> tuple[ApiServer, threading.Thread]:
    """Start a server on a background thread; ``port=0`` picks a free port."""
    server = ApiServer((host, port), service, clock)
    thread = threading.Thread(target=server.serve_forever, name="freshrec-http", daemon=True)
    thread.start()
    return server, thread
