"""Byte transports and the request/response client on top of them.

Both transports push received lines to a callback from one dedicated
reader thread and serialize writes behind a lock, so any number of
threads may issue calls against the same connection. Responses are
matched to callers by JSON-RPC id; a line that fails to decode is
counted and skipped rather than poisoning the stream.
"""

from __future__ import annotations

import itertools
import logging
import socket
import subprocess
import threading
from typing import Any, Callable

import requests

from .errors import (
    RpcTimeoutError,
    ToolExecutionError,
    TransportClosedError,
    TransportError,
)
from .protocol import (
    Capabilities,
    RESPONSE,
    RpcMessage,
    ToolDescriptor,
    decode_frame,
    encode_frame,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = "2024-11-05"


class StdioTransport:
    """Newline-delimited JSON over a child process's stdin/stdout."""

    def __init__(self, proc: subprocess.Popen):
        if proc.stdin is None or proc.stdout is None:
            raise ValueError("child process must be started with piped stdin/stdout")
        self._proc = proc
        self._write_lock = threading.Lock()
        self._closed = False
        self._reader: threading.Thread | None = None

    def start(self, on_line: Callable[[bytes], None], on_eof: Callable[[], None]) -> None:
        def read_loop() -> None:
            stream = self._proc.stdout
            try:
                for line in iter(stream.readline, b""):
                    if line.strip():
                        on_line(line)
            except (ValueError, OSError):
                pass  # stream closed under the reader
            on_eof()

        self._reader = threading.Thread(target=read_loop, name="stdio-reader", daemon=True)
        self._reader.start()

    def send_line(self, data: bytes) -> None:
        with self._write_lock:
            if self._closed:
                raise TransportClosedError("stdio transport closed")
            try:
                self._proc.stdin.write(data)
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as exc:
                raise TransportClosedError(f"stdio write failed: {exc}") from exc

    def close(self) -> None:
        with self._write_lock:
            self._closed = True
            try:
                self._proc.stdin.close()
            except OSError:
                pass


class _SseDecoder:
    """Incremental text/event-stream decoder. feed() yields event payloads."""

    def __init__(self) -> None:
        self._buf = b""
        self._data: list[str] = []

    def feed(self, chunk: bytes) -> list[str]:
        events: list[str] = []
        self._buf += chunk
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = self._buf[:nl].rstrip(b"\r")
            self._buf = self._buf[nl + 1 :]
            if not line:
                if self._data:
                    events.append("\n".join(self._data))
                    self._data = []
                continue
            if line.startswith(b":"):
                continue
            field, _, value = line.partition(b":")
            if value.startswith(b" "):
                value = value[1:]
            if field == b"data":
                self._data.append(value.decode("utf-8", errors="replace"))
        return events


class SseTransport:
    """Server-sent-events stream for replies, HTTP POST for requests."""

    def __init__(self, url: str, post_url: str | None = None, connect_timeout_s: float = 5.0):
        self.url = url
        self.post_url = post_url or url
        self._connect_timeout_s = connect_timeout_s
        self._session = requests.Session()
        self._response: requests.Response | None = None
        self._write_lock = threading.Lock()
        self._closed = False
        self._reader: threading.Thread | None = None

    def start(self, on_line: Callable[[bytes], None], on_eof: Callable[[], None]) -> None:
        # Open the stream before returning so a dead endpoint fails fast.
        self._response = self._session.get(
            self.url,
            stream=True,
            timeout=(self._connect_timeout_s, None),
            headers={"Accept": "text/event-stream"},
        )
        if self._response.status_code != 200:
            status = self._response.status_code
            self._response.close()
            raise TransportError(f"SSE endpoint answered HTTP {status}")

        def read_loop() -> None:
            decoder = _SseDecoder()
            raw = self._response.raw
            # read1 hands back whatever bytes are available instead of
            # blocking for a full buffer; an SSE stream never ends on
            # its own, so anything else would sit on partial events.
            read1 = getattr(raw, "read1", None)
            try:
                while True:
                    chunk = read1(8192) if read1 is not None else raw.read(1)
                    if not chunk:
                        break
                    for payload in decoder.feed(chunk):
                        on_line(payload.encode("utf-8"))
            except Exception:
                pass  # dropped stream and deliberate close land here alike
            on_eof()

        self._reader = threading.Thread(target=read_loop, name="sse-reader", daemon=True)
        self._reader.start()

    def send_line(self, data: bytes) -> None:
        with self._write_lock:
            if self._closed:
                raise TransportClosedError("sse transport closed")
        try:
            resp = self._session.post(
                self.post_url,
                data=data,
                headers={"Content-Type": "application/json"},
                timeout=self._connect_timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportClosedError(f"sse post failed: {exc}") from exc
        if resp.status_code >= 300:
            raise TransportError(f"sse post answered HTTP {resp.status_code}")

    def close(self) -> None:
        with self._write_lock:
            self._closed = True
        resp = self._response
        if resp is not None:
            # response.close() would block on the buffered-reader lock
            # the reader thread holds inside recv; shutting the socket
            # down first turns that recv into EOF.
            sock = None
            try:
                sock = resp.raw._fp.fp.raw._sock
            except AttributeError:
                pass
            if sock is not None:
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
            try:
                resp.raw.close()
            except Exception:
                pass
        self._session.close()


class _Waiter:
    __slots__ = ("event", "message", "failure")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.message: RpcMessage | None = None
        self.failure: Exception | None = None


class RpcClient:
    """Correlates requests with responses over one transport.

    Multiple threads may call concurrently; the transport's write lock
    keeps frames whole and the pending map routes each response to the
    thread that asked for it.
    """

    def __init__(self, transport, on_broken: Callable[["RpcClient"], None] | None = None):
        self._transport = transport
        self._on_broken = on_broken
        self._lock = threading.Lock()
        self._pending: dict[int, _Waiter] = {}
        self._ids = itertools.count(1)
        self._closed = False
        self.malformed_lines = 0
        transport.start(self._handle_line, self._handle_eof)

    @property
    def closed(self) -> bool:
        return self._closed

    def call(self, method: str, params: Any = None, timeout: float = 30.0) -> Any:
        """Send a request and return the result value.

        Raises ToolExecutionError when the peer answers with a JSON-RPC
        error, RpcTimeoutError when nothing arrives in time, and
        TransportClosedError when the connection dies underneath us.
        """
        with self._lock:
            if self._closed:
                raise TransportClosedError("client closed")
            request_id = next(self._ids)
            waiter = _Waiter()
            self._pending[request_id] = waiter
        try:
            self._transport.send_line(encode_frame(RpcMessage.request(request_id, method, params)))
        except Exception:
            with self._lock:
                self._pending.pop(request_id, None)
            raise
        if not waiter.event.wait(timeout):
            with self._lock:
                self._pending.pop(request_id, None)
            raise RpcTimeoutError(f"no response to {method} within {timeout}s")
        if waiter.failure is not None:
            raise waiter.failure
        msg = waiter.message
        if msg.error is not None:
            raise ToolExecutionError(msg.error.message, code=msg.error.code, data=msg.error.data)
        return msg.result

    def notify(self, method: str, params: Any = None) -> None:
        self._transport.send_line(encode_frame(RpcMessage.notification(method, params)))

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._transport.close()
        self._fail_pending(TransportClosedError("client closed"))

    def _handle_line(self, line: bytes) -> None:
        try:
            msg = decode_frame(line)
        except Exception:
            self.malformed_lines += 1
            logger.debug("skipping undecodable line: %r", line[:200])
            return
        if msg.kind != RESPONSE:
            logger.debug("ignoring %s from server: %s", msg.kind, msg.method)
            return
        with self._lock:
            waiter = self._pending.pop(msg.id, None)
        if waiter is None:
            logger.debug("response for unknown id %r dropped", msg.id)
            return
        waiter.message = msg
        waiter.event.set()

    def _handle_eof(self) -> None:
        was_closed = self._closed
        self._closed = True
        self._fail_pending(TransportClosedError("transport reached EOF"))
        if not was_closed and self._on_broken is not None:
            self._on_broken(self)

    def _fail_pending(self, exc: Exception) -> None:
        with self._lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for waiter in waiters:
            waiter.failure = exc
            waiter.event.set()


def perform_handshake(client: RpcClient, timeout_s: float = 5.0) -> Capabilities:
    """Initialize the session and discover what the server offers.

    initialize and tools/list must both succeed within the deadline; a
    server that reports an error for resources/list or prompts/list is
    treated as offering none of that kind.
    """
    import time

    deadline = time.monotonic() + timeout_s

    def remaining() -> float:
        return max(0.01, deadline - time.monotonic())

    client.call(
        "initialize",
        {
            "protocolVersion": PROTOCOL_VERSION,
            "capabilities": {},
            "clientInfo": {"name": "bridgekit", "version": "0.1.0"},
        },
        timeout=remaining(),
    )
    client.notify("notifications/initialized")

    tools_result = client.call("tools/list", None, timeout=remaining())
    if not isinstance(tools_result, dict) or not isinstance(tools_result.get("tools"), list):
        raise TransportError("malformed tools/list reply")
    tools = tuple(ToolDescriptor.from_wire(t) for t in tools_result["tools"])

    def optional_list(method: str, key: str) -> tuple[dict, ...]:
        # An error reply or a lost reply both mean "none of this kind";
        # only initialize and tools/list are allowed to sink the session.
        try:
            result = client.call(method, None, timeout=remaining())
        except (ToolExecutionError, RpcTimeoutError):
            return ()
        if not isinstance(result, dict) or not isinstance(result.get(key), list):
            return ()
        return tuple(x for x in result[key] if isinstance(x, dict))

    resources = optional_list("resources/list", "resources")
    prompts = optional_list("prompts/list", "prompts")
    return Capabilities(tools=tools, resources=resources, prompts=prompts)


def call_tool(client: RpcClient, tool: str, arguments: dict | None, timeout: float) -> Any:
    """tools/call round trip returning the server's result verbatim."""
    return client.call("tools/call", {"name": tool, "arguments": arguments or {}}, timeout=timeout)
