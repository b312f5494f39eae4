"""Small JSON-over-HTTP plumbing shared by the server and the sidecar.

The listener is a plain ``socketserver.TCPServer`` whose accepted
connections are handed to a fixed-size thread pool, so the worker count is
a real concurrency limit (``ThreadingHTTPServer`` would spawn one thread per
connection).  Every response closes its connection.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler
from typing import Any, Callable, Mapping
from urllib.parse import parse_qsl, urlsplit

access_log = logging.getLogger("xrf.access")

MAX_BODY = 1 << 20


class APIError(Exception):
    """Raised by a route to produce a non-200 response."""

    def __init__(self, status: int, reason: str, detail: str = "") -> None:
        super().__init__(f"{status} {reason}: {detail}" if detail else f"{status} {reason}")
        self.status = status
        self.reason = reason
        self.detail = detail

    def body(self) -> dict[str, str]:
        out = {"error": self.reason}
        if self.detail:
            out["detail"] = self.detail
        return out


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, str]
    headers: Mapping[str, str]
    raw_body: bytes

    def json(self) -> Any:
        if not self.raw_body:
            raise APIError(400, "malformed", "request body required")
        try:
            return json.loads(self.raw_body)
        except (ValueError, UnicodeDecodeError):
            raise APIError(400, "malformed", "body is not JSON") from None


Route = Callable[[Request], Any]


@dataclass
class OpStats:
    count: int = 0
    wall: float = 0.0
    cpu: float = 0.0


@dataclass
class Router:
    routes: dict[tuple[str, str], Route] = field(default_factory=dict)
    # per-route accounting: the wall and thread-CPU time of the full dispatch
    stats: dict[str, OpStats] = field(default_factory=dict)
    on_complete: Callable[[str, int, float], None] | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, method: str, path: str, fn: Route) -> None:
        self.routes[(method, path)] = fn

    def reset_stats(self) -> None:
        with self._lock:
            self.stats.clear()

    def snapshot(self) -> dict[str, dict[str, float]]:
        with self._lock:
            return {k: {"count": v.count, "wall": v.wall, "cpu": v.cpu} for k, v in self.stats.items()}

    def record(self, path: str, wall: float, cpu: float) -> None:
        with self._lock:
            s = self.stats.setdefault(path, OpStats())
            s.count += 1
            s.wall += wall
            s.cpu += cpu


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: PooledHTTPServer

    def _dispatch(self) -> None:
        t0, c0 = time.perf_counter(), time.thread_time()
        url = urlsplit(self.path)
        router = self.server.router
        status, body = 404, {"error": "not-found"}
        try:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                raise APIError(413, "too-large")
            raw = self.rfile.read(length) if length else b""
            fn = router.routes.get((self.command, url.path))
            if fn is None:
                if any(p == url.path for _, p in router.routes):
                    raise APIError(405, "method-not-allowed")
                raise APIError(404, "not-found")
            req = Request(self.command, url.path, dict(parse_qsl(url.query)), self.headers, raw)
            status, body = 200, fn(req)
        except APIError as exc:
            status, body = exc.status, exc.body()
        except Exception:
            access_log.exception("unhandled error on %s %s", self.command, url.path)
            status, body = 500, {"error": "internal"}
        payload = json.dumps(body, separators=(",", ":")).encode("utf-8")
        # recorded before replying so a caller that has its answer also sees the stats
        wall, cpu = time.perf_counter() - t0, time.thread_time() - c0
        router.record(url.path, wall, cpu)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(payload)
        self.close_connection = True
        if router.on_complete is not None:
            router.on_complete(url.path, status, wall)
        if access_log.isEnabledFor(logging.INFO):
            access_log.info(
                json.dumps({"method": self.command, "endpoint": url.path, "status": status,
                            "wall_us": round(wall * 1e6)})
            )

    do_GET = do_PUT = do_POST = do_DELETE = _dispatch

    def log_message(self, format: str, *args: Any) -> None:
        pass


class PooledHTTPServer(socketserver.TCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 1024

    def __init__(self, address: tuple[str, int], router: Router, workers: int) -> None:
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        self.router = router
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="xrf-worker")
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def process_request(self, request: socket.socket, client_address: Any) -> None:
        self._pool.submit(self._work, request, client_address)

    def _work(self, request: socket.socket, client_address: Any) -> None:
        try:
            self.finish_request(request, client_address)
        except Exception:
            self.handle_error(request, client_address)
        finally:
            self.shutdown_request(request)

    def handle_error(self, request: Any, client_address: Any) -> None:
        access_log.debug("connection error from %s", client_address, exc_info=True)

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="xrf-accept", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        self._pool.shutdown(wait=True, cancel_futures=True)


def parse_listen(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"listen address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class TransportError(OSError):
    """The peer could not be reached or answered with garbage."""


def call(
    method: str,
    url: str,
    body: Any = None,
    headers: Mapping[str, str] | None = None,
    timeout: float = 30.0,
) -> tuple[int, Any]:
    """One JSON request on a fresh connection; returns ``(status, decoded body)``."""
    parts = urlsplit(url if "://" in url else "http://" + url)
    target = parts.path or "/"
    if parts.query:
        target += "?" + parts.query
    payload = None if body is None else json.dumps(body, separators=(",", ":")).encode("utf-8")
    hdrs = {"Accept": "application/json", "Connection": "close"}
    if payload is not None:
        hdrs["Content-Type"] = "application/json"
    hdrs.update(headers or {})
    conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
    try:
        conn.request(method, target, body=payload, headers=hdrs)
        resp = conn.getresponse()
        raw = resp.read()
    except (OSError, http.client.HTTPException) as exc:
        raise TransportError(f"{method} {url}: {exc}") from exc
    finally:
        conn.close()
    if not raw:
        return resp.status, None
    try:
        return resp.status, json.loads(raw)
    except ValueError:
        raise TransportError(f"{method} {url}: response is not JSON") from None
