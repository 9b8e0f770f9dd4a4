"""In-process chat-completion server for tests and offline demos.

Each server answers POSTs with a canned reply wrapped in the
``choices[0].message.content`` envelope. Delay and HTTP status are settable so
tests can exercise timeouts, retries and malformed output.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional, Union

Reply = Union[str, Callable[[dict], str]]


@dataclass
class MockBehavior:
    reply: Reply = '{"findings": []}'
    delay_s: float = 0.0
    status: int = 200
    # Statuses served before falling back to ``status``; lets tests script "fail twice, then succeed".
    script: list[int] = field(default_factory=list)


class MockBackend:
    """Threaded HTTP server bound to 127.0.0.1 on an ephemeral port."""

    def __init__(self, behavior: Optional[MockBehavior] = None):
        self.behavior = behavior or MockBehavior()
        self.requests: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def _handler(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw or b"{}")
                except ValueError:
                    payload = {"_raw": raw.decode("utf-8", "replace")}
                b = mock.behavior
                with mock._lock:
                    mock.requests.append(payload)
                    status = b.script.pop(0) if b.script else b.status
                if b.delay_s:
                    # Wake early on shutdown so slow handlers never outlive the test.
                    mock._stop.wait(b.delay_s)
                if status != 200:
                    body = json.dumps({"error": {"message": f"mock status {status}"}}).encode()
                else:
                    content = b.reply(payload) if callable(b.reply) else b.reply
                    body = json.dumps({
                        "id": f"mock-{len(mock.requests)}",
                        "object": "chat.completion",
                        "created": int(time.time()),
                        "model": payload.get("model", ""),
                        "choices": [{"index": 0, "finish_reason": "stop",
                                     "message": {"role": "assistant", "content": content}}],
                    }).encode()
                try:
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass  # client gave up after its timeout

        return Handler

    def start(self) -> "MockBackend":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=2)

    def __enter__(self) -> "MockBackend":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def findings_reply(findings: list[dict[str, Any]]) -> str:
    return json.dumps({"findings": findings})
