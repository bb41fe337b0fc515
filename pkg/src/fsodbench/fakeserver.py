"""Scriptable in-process HTTP server speaking the backend wire protocol.

Used by the tests and demos to exercise remote backends offline::

    with FakeBackendServer(script=[(429, {}), (429, {}), (200, {"detections": []})]) as srv:
        det = RemoteDetector(BackendConfig(srv.url))
        ...
    srv.requests   # every decoded request body, in arrival order
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable, Optional, Union

Body = Union[dict, list, str, bytes]
Reply = tuple[int, Body]


class FakeBackendServer:
    """Replies from ``script`` in order, then from ``responder``.

    ``responder`` receives the decoded JSON request and returns
    ``(status, body)``; string or bytes bodies are sent verbatim, which is
    how malformed responses are staged. ``delay`` seconds are slept inside
    each request so concurrent requests overlap.
    """

    def __init__(self, script: Iterable[Reply] = (), responder: Optional[Callable[[dict], Reply]] = None,
                 delay: float = 0.0):
        self._script = deque(script)
        self._responder = responder or (lambda req: (200, {"detections": []}))
        self.delay = delay
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/"

    def _reply(self, request: dict) -> Reply:
        with self._lock:
            if self._script:
                return self._script.popleft()
        return self._responder(request)

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                try:
                    req = json.loads(raw)
                except ValueError:
                    req = {"_unparsed": raw.decode("utf-8", "replace")}
                with server._lock:
                    server.requests.append(req)
                    server.headers.append(dict(self.headers))
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                try:
                    if server.delay:
                        time.sleep(server.delay)
                    status, body = server._reply(req)
                finally:
                    with server._lock:
                        server.in_flight -= 1
                if isinstance(body, (dict, list)):
                    data = json.dumps(body).encode()
                elif isinstance(body, str):
                    data = body.encode()
                else:
                    data = body
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        return Handler

    def start(self) -> "FakeBackendServer":
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self) -> "FakeBackendServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
