"""REST surface of the bridge.

The HTTP layer is a thin translation over the Bridge facade: it parses
paths and bodies, calls one Bridge method, and serializes the outcome.
All state lives in the manager and the confirmation store, so the HTTP
layer can be torn down and rebuilt over the same Bridge without losing
anything.

Routes:
    GET    /servers                          list registered servers
    POST   /servers                          start one server from a config body
    DELETE /servers/{id}                     stop and remove a server
    GET    /servers/{id}/tools               tool descriptors, verbatim
    GET    /servers/{id}/resources           resource descriptors, verbatim
    GET    /servers/{id}/prompts             prompt descriptors, verbatim
    POST   /servers/{id}/tools/{tool}        execute (body = arguments)
    POST   /confirmations/{id}               approve or reject a pending call
    GET    /health                           liveness and server states
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import unquote

from .errors import (
    BridgeError,
    ConfigError,
    ConnectError,
    NotFoundError,
    ProtocolError,
    ResourceExhaustedError,
    RpcTimeoutError,
    SandboxError,
    SandboxTimeoutError,
    SandboxUnavailableError,
    ServerStoppedError,
    ServerUnavailableError,
    ToolExecutionError,
    TransportClosedError,
    TransportError,
)
from .manager import (
    SERVER_NOT_FOUND_MSG,
    STOPPED,
    TOOL_NOT_FOUND_MSG,
    BackoffPolicy,
    ServerConfig,
    ServerManager,
    load_config_file,
)
from .risk import CONFIRM, SANDBOX, ConfirmationStore, ContainerSandbox, RiskEngine, SubprocessSandbox

logger = logging.getLogger(__name__)


class Bridge:
    """Everything behind the REST surface, usable without HTTP too."""

    def __init__(
        self,
        configs: list[ServerConfig] | None = None,
        settings: dict | None = None,
        manager: ServerManager | None = None,
        store: ConfirmationStore | None = None,
        sandbox_backend=None,
        clock=time.time,
    ):
        settings = settings or {}
        if manager is None:
            manager = ServerManager(
                request_timeout_s=float(settings.get("requestTimeoutMs", 30_000)) / 1000.0,
                heartbeat_interval_s=float(settings.get("heartbeatIntervalMs", 10_000)) / 1000.0,
                ping_deadline_s=float(settings.get("pingDeadlineMs", 2_000)) / 1000.0,
                stop_grace_s=float(settings.get("stopGraceMs", 3_000)) / 1000.0,
                backoff=_backoff_from_settings(settings.get("backoff")),
            )
        self.manager = manager
        if sandbox_backend is None:
            backend_name = settings.get("sandboxBackend", "container")
            if backend_name == "subprocess":
                sandbox_backend = SubprocessSandbox()
            else:
                sandbox_backend = ContainerSandbox(settings.get("containerRuntime", "docker"))
        if store is None:
            store = ConfirmationStore(
                ttl_s=float(settings.get("confirmationTtlS", 300)),
                max_pending=int(settings.get("maxPendingConfirmations", 10_000)),
                clock=clock,
            )
        self.risk = RiskEngine(manager, store=store, sandbox_backend=sandbox_backend, clock=clock)
        self.configs = list(configs or [])
        self._started = time.monotonic()
        self._counter_lock = threading.Lock()
        # Which execution path each request took; the level-3 isolation
        # guarantee is asserted against these in tests.
        self.path_counters = {"direct": 0, "confirmation": 0, "sandbox": 0}

    # -- lifecycle ---------------------------------------------------------

    def start_all(self, strict: bool = True) -> dict[str, object]:
        """Start every configured server. strict=False logs failures and
        keeps going, for daemon-style boot."""
        outcome: dict[str, object] = {}
        for config in self.configs:
            try:
                outcome[config.name] = self.manager.start_server(config)
            except BridgeError as exc:
                if strict:
                    raise
                logger.error("server %s failed to start: %s", config.name, exc)
                outcome[config.name] = exc
        return outcome

    def start_monitor(self) -> None:
        self.manager.start_monitor()

    def shutdown(self) -> None:
        self.manager.shutdown()

    def uptime_ms(self) -> int:
        return int((time.monotonic() - self._started) * 1000)

    def _mark(self, path: str) -> None:
        with self._counter_lock:
            self.path_counters[path] += 1

    def path_counts(self) -> dict[str, int]:
        with self._counter_lock:
            return dict(self.path_counters)

    # -- operations backing the routes ------------------------------------

    def list_servers(self) -> list[dict]:
        return [conn.to_summary() for conn in self.manager.list_connections()]

    def start_server(self, body: dict) -> dict:
        if not isinstance(body, dict) or not body.get("name"):
            raise ConfigError("Invalid server configuration")
        config = ServerConfig.from_dict(str(body["name"]), body)
        conn = self.manager.start_server(config)
        return conn.to_summary()

    def stop_server(self, server_id: str) -> None:
        self.manager.stop_server(server_id)

    def _require_server(self, server_id: str):
        conn = self.manager.get(server_id)
        if conn is None or conn.state == STOPPED:
            raise NotFoundError(SERVER_NOT_FOUND_MSG)
        return conn

    def list_tools(self, server_id: str) -> list[dict]:
        conn = self._require_server(server_id)
        return [t.raw for t in conn.capabilities.tools]

    def list_resources(self, server_id: str) -> list[dict]:
        conn = self._require_server(server_id)
        return list(conn.capabilities.resources)

    def list_prompts(self, server_id: str) -> list[dict]:
        conn = self._require_server(server_id)
        return list(conn.capabilities.prompts)

    def process_tool_request(self, server_id: str, tool: str, params: dict) -> tuple[int, dict]:
        """The request pipeline: existence checks, then risk dispatch."""
        conn = self._require_server(server_id)
        if not conn.capabilities.has_tool(tool):
            raise NotFoundError(TOOL_NOT_FOUND_MSG)
        level = self.risk.classify(conn.config, tool)
        if level == CONFIRM:
            self._mark("confirmation")
            entry = self.risk.begin_confirmation(conn.id, tool, params, level)
            return 202, entry.to_response()
        if level == SANDBOX:
            self._mark("sandbox")
            result = self.risk.execute_sandboxed(conn.config, tool, params)
            return 200, {"serverId": conn.id, "tool": tool, "result": result}
        self._mark("direct")
        result = self.manager.route_request(conn.id, tool, params)
        return 200, {"serverId": conn.id, "tool": tool, "result": result}

    def resolve_confirmation(self, confirmation_id: str, body: dict) -> tuple[int, dict]:
        if not isinstance(body, dict):
            raise ValueError("confirmation body must be an object")
        token = body.get("token")
        decision = body.get("decision")
        if not isinstance(token, str) or decision not in ("approve", "reject"):
            raise ValueError("confirmation body needs a token and a decision of approve/reject")
        status, entry, result = self.risk.resolve(confirmation_id, token, decision)
        if status == "cancelled":
            return 200, {"status": "cancelled"}
        return 200, {"serverId": entry.server_id, "tool": entry.tool, "result": result}

    def health(self) -> dict:
        return {
            "status": "ok",
            "uptimeMs": self.uptime_ms(),
            "servers": [{"id": c.id, "state": c.state} for c in self.manager.list_connections()],
            "pendingConfirmations": self.risk.pending_count(),
        }


def _backoff_from_settings(data: dict | None) -> BackoffPolicy:
    if not isinstance(data, dict):
        return BackoffPolicy()
    return BackoffPolicy(
        first_delay_s=float(data.get("firstDelayMs", 500)) / 1000.0,
        factor=float(data.get("factor", 2.0)),
        cap_s=float(data.get("capMs", 8_000)) / 1000.0,
        max_attempts=int(data.get("maxAttempts", 5)),
    )


def error_to_http(exc: Exception) -> tuple[int, str]:
    """Map a domain error to (status, machine code)."""
    if isinstance(exc, NotFoundError):
        return 404, "not_found"
    if isinstance(exc, (ValueError,)):
        return 400, "bad_request"
    if isinstance(exc, ResourceExhaustedError):
        return 429, "resource_exhausted"
    if isinstance(exc, (RpcTimeoutError, SandboxTimeoutError)):
        return 504, "timeout"
    if isinstance(exc, ConfigError):
        return 502, "invalid_config"
    if isinstance(exc, ConnectError):
        return 502, "connect_failed"
    if isinstance(exc, SandboxUnavailableError):
        return 502, "sandbox_unavailable"
    if isinstance(exc, SandboxError):
        return 502, "sandbox_failed"
    if isinstance(exc, ToolExecutionError):
        return 502, "tool_error"
    if isinstance(exc, (ServerStoppedError, ServerUnavailableError, TransportClosedError, TransportError, ProtocolError)):
        return 502, "server_unavailable"
    return 500, "internal"


class _BadRequestBody(ValueError):
    pass


class BridgeRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "bridgekit/0.1"
    # headers and body leave as separate small writes; without TCP_NODELAY
    # the second one stalls behind the peer's delayed ACK (~40ms)
    disable_nagle_algorithm = True

    @property
    def bridge(self) -> Bridge:
        return self.server.bridge  # type: ignore[attr-defined]

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s %s", self.address_string(), fmt % args)

    # -- verbs -------------------------------------------------------------

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_DELETE(self) -> None:
        self._dispatch("DELETE")

    def _dispatch(self, verb: str) -> None:
        try:
            status, body = self._route(verb)
        except _BadRequestBody as exc:
            self._send_json(400, {"error": {"code": "bad_request", "message": str(exc)}})
        except Exception as exc:  # every domain error funnels through here
            status, code = error_to_http(exc)
            if status == 500:
                logger.exception("unhandled error serving %s %s", verb, self.path)
            self._send_json(status, {"error": {"code": code, "message": str(exc) or code}})
        else:
            self._send_json(status, body)

    def _route(self, verb: str) -> tuple[int, dict | list | None]:
        parts = [unquote(p) for p in self.path.split("?")[0].split("/") if p]
        if verb == "GET" and parts == ["health"]:
            return 200, self.bridge.health()
        if verb == "GET" and parts == ["servers"]:
            return 200, self.bridge.list_servers()
        if verb == "POST" and parts == ["servers"]:
            return 201, self.bridge.start_server(self._read_body())
        if len(parts) == 2 and parts[0] == "servers":
            if verb == "DELETE":
                self.bridge.stop_server(parts[1])
                return 204, None
        if len(parts) == 3 and parts[0] == "servers" and verb == "GET":
            server_id, kind = parts[1], parts[2]
            if kind == "tools":
                return 200, self.bridge.list_tools(server_id)
            if kind == "resources":
                return 200, self.bridge.list_resources(server_id)
            if kind == "prompts":
                return 200, self.bridge.list_prompts(server_id)
        if len(parts) == 4 and parts[0] == "servers" and parts[2] == "tools" and verb == "POST":
            return self.bridge.process_tool_request(parts[1], parts[3], self._read_body())
        if len(parts) == 2 and parts[0] == "confirmations" and verb == "POST":
            return self.bridge.resolve_confirmation(parts[1], self._read_body())
        raise NotFoundError("No such route")

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            body = json.loads(raw)
        except json.JSONDecodeError:
            raise _BadRequestBody("request body is not valid JSON")
        if not isinstance(body, dict):
            raise _BadRequestBody("request body must be a JSON object")
        return body

    def _send_json(self, status: int, body: dict | list | None) -> None:
        payload = b"" if status == 204 or body is None else json.dumps(body).encode("utf-8")
        try:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            if payload:
                self.wfile.write(payload)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away mid-reply


class BridgeHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128  # survive synchronized connect bursts

    def __init__(self, address: tuple[str, int], bridge: Bridge):
        super().__init__(address, BridgeRequestHandler)
        self.bridge = bridge


def start_http(bridge: Bridge, host: str = "127.0.0.1", port: int = 0) -> tuple[BridgeHttpServer, threading.Thread]:
    """Bind and serve in a background thread. Port 0 picks a free port;
    read the real one from server.server_address."""
    server = BridgeHttpServer((host, port), bridge)
    thread = threading.Thread(target=server.serve_forever, name="bridge-http", daemon=True)
    thread.start()
    return server, thread


def serve(config_path: str | None, port: int = 3000, host: str = "0.0.0.0") -> None:
    """Blocking entry point behind the serve CLI command."""
    configs, settings = load_config_file(config_path) if config_path else ([], {})
    bridge = Bridge(configs, settings=settings)
    bridge.start_all(strict=False)
    bridge.start_monitor()
    server, _ = start_http(bridge, host=host, port=port)
    bound = server.server_address[1]
    logger.info("bridge listening on %s:%d with %d server(s)", host, bound, len(bridge.list_servers()))
    print(f"bridgekit listening on http://{host}:{bound}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        bridge.shutdown()
