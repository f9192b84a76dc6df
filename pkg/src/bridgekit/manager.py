"""Server registry and lifecycle supervision.

Each configured server gets a stable UUID that survives reconnects.
A connection owns one or more spawned instances (poolSize); requests
round-robin across the pool, and within one instance a dispatcher
thread keeps exactly one request in flight at a time, in FIFO order.
Responses can never cross callers because every request carries its
own JSON-RPC id.

Startup is atomic: if any instance of a server fails to spawn or
complete its handshake, everything already started for that entry is
killed and nothing is registered. A monitor thread pings healthy
servers on an interval, demotes the silent ones to degraded, and
brings degraded ones back with exponential backoff.
"""

from __future__ import annotations

import concurrent.futures
import logging
import os
import queue
import re
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import (
    ConfigError,
    ConnectError,
    NotFoundError,
    RpcTimeoutError,
    ServerStoppedError,
    ServerUnavailableError,
    TransportClosedError,
)
from .protocol import Capabilities
from .risk import SandboxSpec
from .transport import RpcClient, SseTransport, StdioTransport, perform_handshake

logger = logging.getLogger(__name__)

STARTING = "starting"
HEALTHY = "healthy"
DEGRADED = "degraded"
STOPPED = "stopped"

INVALID_CONFIG_MSG = "Invalid server configuration"
CONNECT_FAILED_MSG = "Failed to connect to MCP server"
SERVER_NOT_FOUND_MSG = "Server not found"
TOOL_NOT_FOUND_MSG = "Tool not found"

_ENV_VAR = re.compile(r"\$\{(\w+)\}")


def expand_env_value(value: str, env: dict[str, str] | None = None) -> str:
    """Substitute ${VAR} from the environment; unknown vars stay literal."""
    src = os.environ if env is None else env

    def sub(match: re.Match) -> str:
        return src.get(match.group(1), match.group(0))

    return _ENV_VAR.sub(sub, value)


@dataclass(frozen=True)
class BackoffPolicy:
    """Reconnect pacing: first_delay_s doubling up to cap_s, max_attempts tries."""

    first_delay_s: float = 0.5
    factor: float = 2.0
    cap_s: float = 8.0
    max_attempts: int = 5

    def delays(self) -> list[float]:
        out, delay = [], self.first_delay_s
        for _ in range(self.max_attempts):
            out.append(delay)
            delay = min(delay * self.factor, self.cap_s)
        return out


@dataclass(frozen=True)
class ServerConfig:
    """One server entry, as given in config or a start request."""

    name: str
    transport: str = "stdio"
    command: str = ""
    args: tuple[str, ...] = ()
    env: dict[str, str] = field(default_factory=dict)
    url: str = ""
    post_url: str = ""
    risk_level: int = 1
    tool_risk: dict[str, int] = field(default_factory=dict)
    pool_size: int = 1
    connect_timeout_ms: int = 5000
    request_timeout_ms: int | None = None
    sandbox: SandboxSpec | None = None

    def validate(self) -> None:
        ok = (
            bool(self.name)
            and self.transport in ("stdio", "sse")
            and self.risk_level in (1, 2, 3)
            and all(v in (1, 2, 3) for v in self.tool_risk.values())
            and self.pool_size >= 1
            and self.connect_timeout_ms > 0
        )
        if ok and self.transport == "stdio":
            ok = bool(self.command)
        if ok and self.transport == "sse":
            ok = bool(self.url)
        if not ok:
            raise ConfigError(INVALID_CONFIG_MSG)

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "ServerConfig":
        if not isinstance(data, dict):
            raise ConfigError(INVALID_CONFIG_MSG)
        env = {
            str(k): expand_env_value(str(v))
            for k, v in (data.get("env") or {}).items()
        }
        args = data.get("args") or []
        if not isinstance(args, list):
            raise ConfigError(INVALID_CONFIG_MSG)
        tool_risk = {str(k): int(v) for k, v in (data.get("toolRisk") or {}).items()}
        sandbox = SandboxSpec.from_dict(data["sandbox"]) if isinstance(data.get("sandbox"), dict) else None
        try:
            config = cls(
                name=name,
                transport=str(data.get("transport", "stdio")),
                command=str(data.get("command", "")),
                args=tuple(str(a) for a in args),
                env=env,
                url=str(data.get("url", "")),
                post_url=str(data.get("postUrl", "")),
                risk_level=int(data.get("riskLevel", 1)),
                tool_risk=tool_risk,
                pool_size=int(data.get("poolSize", 1)),
                connect_timeout_ms=int(data.get("connectTimeoutMs", 5000)),
                request_timeout_ms=int(data["requestTimeoutMs"]) if "requestTimeoutMs" in data else None,
                sandbox=sandbox,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(INVALID_CONFIG_MSG) from exc
        config.validate()
        return config


def parse_config(doc: dict) -> tuple[list[ServerConfig], dict]:
    """Split a config document into server entries and bridge settings."""
    if not isinstance(doc, dict) or not isinstance(doc.get("mcpServers"), dict):
        raise ConfigError(INVALID_CONFIG_MSG)
    servers = [ServerConfig.from_dict(name, entry) for name, entry in doc["mcpServers"].items()]
    settings = doc.get("settings") or {}
    return servers, settings


def load_config_file(path: str) -> tuple[list[ServerConfig], dict]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(json.load(fh))


class _Sentinel:
    pass


_CLOSE = _Sentinel()


@dataclass
class _QueuedCall:
    method: str
    params: Any
    timeout_s: float
    future: concurrent.futures.Future


class ServerInstance:
    """One spawned process (or SSE session) plus its FIFO dispatcher."""

    def __init__(self, proc: subprocess.Popen | None, client: RpcClient, label: str):
        self.proc = proc
        self.client = client
        self.label = label
        self.broken = False
        self.broken_hook: Callable[[], None] | None = None
        self._closing = False
        self._queue: "queue.Queue[_QueuedCall | _Sentinel]" = queue.Queue()
        self._dispatcher = threading.Thread(target=self._run, name=f"dispatch-{label}", daemon=True)
        self._dispatcher.start()

    def on_transport_broken(self) -> None:
        self.broken = True
        self.reap()
        if not self._closing and self.broken_hook is not None:
            self.broken_hook()

    def submit(self, method: str, params: Any, timeout_s: float) -> concurrent.futures.Future:
        fut: concurrent.futures.Future = concurrent.futures.Future()
        if self._closing:
            fut.set_exception(ServerStoppedError("server stopped"))
            return fut
        self._queue.put(_QueuedCall(method, params, timeout_s, fut))
        return fut

    @property
    def queue_depth(self) -> int:
        return self._queue.qsize()

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if isinstance(item, _Sentinel):
                break
            if self._closing:
                item.future.set_exception(ServerStoppedError("server stopped"))
                continue
            try:
                result = self.client.call(item.method, item.params, timeout=item.timeout_s)
            except TransportClosedError as exc:
                failure: Exception = ServerStoppedError("server stopped") if self._closing else exc
                item.future.set_exception(failure)
            except Exception as exc:
                item.future.set_exception(exc)
            else:
                item.future.set_result(result)
        self._drain()

    def _drain(self) -> None:
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return
            if isinstance(item, _QueuedCall):
                item.future.set_exception(ServerStoppedError("server stopped"))

    def close(self, grace_s: float = 3.0) -> None:
        """Stop accepting work, fail what is queued, and reap the process."""
        self._closing = True
        self.client.close()
        self._queue.put(_CLOSE)
        if self.proc is not None:
            try:
                self.proc.terminate()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=grace_s)
            except subprocess.TimeoutExpired:
                logger.warning("instance %s ignored terminate; killing", self.label)
                try:
                    self.proc.kill()
                except OSError:
                    pass
                try:
                    self.proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    pass
        self._dispatcher.join(timeout=5)

    def reap(self) -> None:
        if self.proc is not None:
            self.proc.poll()

    def process_alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None


class ServerConnection:
    """Public view of one registered server. The id outlives reconnects."""

    def __init__(self, server_id: str, config: ServerConfig, capabilities: Capabilities, instances: list[ServerInstance]):
        self.id = server_id
        self.config = config
        self.capabilities = capabilities
        self.state = HEALTHY
        self.last_heartbeat: float | None = None
        self.reconnecting = False
        self._state_lock = threading.Lock()
        self._rr = 0
        self._instances = instances
        for inst in instances:
            self._adopt(inst)

    def _adopt(self, instance: ServerInstance) -> None:
        instance.broken_hook = self.mark_degraded
        if instance.broken:
            self.mark_degraded()

    def mark_degraded(self) -> None:
        with self._state_lock:
            if self.state == HEALTHY:
                self.state = DEGRADED
                logger.warning("server %s (%s) degraded", self.config.name, self.id)

    def set_state(self, state: str) -> None:
        with self._state_lock:
            self.state = state

    def next_instance(self) -> ServerInstance:
        with self._state_lock:
            inst = self._instances[self._rr % len(self._instances)]
            self._rr += 1
            return inst

    def instances(self) -> list[ServerInstance]:
        with self._state_lock:
            return list(self._instances)

    def swap_instances(self, fresh: list[ServerInstance], capabilities: Capabilities) -> list[ServerInstance]:
        with self._state_lock:
            old = self._instances
            self._instances = fresh
            self.capabilities = capabilities
            self._rr = 0
        for inst in fresh:
            self._adopt(inst)
        return old

    @property
    def queue_depth(self) -> int:
        return sum(inst.queue_depth for inst in self.instances())

    def to_summary(self) -> dict:
        return {
            "id": self.id,
            "name": self.config.name,
            "state": self.state,
            "riskLevel": self.config.risk_level,
            "toolCount": len(self.capabilities.tools),
        }


class ServerManager:
    def __init__(
        self,
        *,
        request_timeout_s: float = 30.0,
        heartbeat_interval_s: float = 10.0,
        ping_deadline_s: float = 2.0,
        stop_grace_s: float = 3.0,
        backoff: BackoffPolicy | None = None,
    ):
        self.request_timeout_s = request_timeout_s
        self.heartbeat_interval_s = heartbeat_interval_s
        self.ping_deadline_s = ping_deadline_s
        self.stop_grace_s = stop_grace_s
        self.backoff = backoff or BackoffPolicy()
        self._lock = threading.RLock()
        self._registry: dict[str, ServerConnection] = {}
        self._monitor: threading.Thread | None = None
        self._stop_monitor = threading.Event()

    # -- lifecycle ---------------------------------------------------------

    def start_server(self, config: ServerConfig) -> ServerConnection:
        config.validate()
        instances: list[ServerInstance] = []
        try:
            capabilities = None
            for i in range(config.pool_size):
                instance, caps = self._spawn_instance(config, i)
                instances.append(instance)
                if capabilities is None:
                    capabilities = caps
        except Exception:
            for inst in instances:
                inst.close(grace_s=0.5)
            raise
        conn = ServerConnection(str(uuid.uuid4()), config, capabilities, instances)
        with self._lock:
            self._registry[conn.id] = conn
        logger.info(
            "server %s (%s) healthy with %d tool(s), pool=%d",
            config.name,
            conn.id,
            len(capabilities.tools),
            config.pool_size,
        )
        return conn

    def _spawn_instance(self, config: ServerConfig, index: int) -> tuple[ServerInstance, Capabilities]:
        label = f"{config.name}#{index}"
        holder: dict[str, ServerInstance] = {}

        def broken(_client: RpcClient) -> None:
            inst = holder.get("instance")
            if inst is not None:
                inst.on_transport_broken()

        proc = None
        try:
            if config.transport == "stdio":
                env = os.environ.copy()
                env.update(config.env)
                try:
                    proc = subprocess.Popen(
                        [config.command, *config.args],
                        stdin=subprocess.PIPE,
                        stdout=subprocess.PIPE,
                        stderr=subprocess.DEVNULL,
                        env=env,
                    )
                except OSError as exc:
                    raise ConnectError(CONNECT_FAILED_MSG) from exc
                transport = StdioTransport(proc)
            else:
                transport = SseTransport(
                    config.url,
                    config.post_url or None,
                    connect_timeout_s=config.connect_timeout_ms / 1000.0,
                )
            client = RpcClient(transport, on_broken=broken)
            instance = ServerInstance(proc, client, label)
            holder["instance"] = instance
        except ConnectError:
            raise
        except Exception as exc:
            if proc is not None:
                _kill_quietly(proc)
            raise ConnectError(CONNECT_FAILED_MSG) from exc

        try:
            caps = perform_handshake(client, timeout_s=config.connect_timeout_ms / 1000.0)
        except Exception as exc:
            instance.close(grace_s=0.5)
            raise ConnectError(CONNECT_FAILED_MSG) from exc
        return instance, caps

    def stop_server(self, server_id: str) -> None:
        with self._lock:
            conn = self._registry.pop(server_id, None)
        if conn is None:
            raise NotFoundError(SERVER_NOT_FOUND_MSG)
        conn.set_state(STOPPED)
        for inst in conn.instances():
            inst.close(grace_s=self.stop_grace_s)
        logger.info("server %s (%s) stopped", conn.config.name, server_id)

    def shutdown(self) -> None:
        self.stop_monitor()
        for conn in self.list_connections():
            try:
                self.stop_server(conn.id)
            except NotFoundError:
                pass

    # -- lookup ------------------------------------------------------------

    def get(self, server_id: str) -> ServerConnection | None:
        with self._lock:
            return self._registry.get(server_id)

    def list_connections(self) -> list[ServerConnection]:
        with self._lock:
            return list(self._registry.values())

    def find_by_name(self, name: str) -> ServerConnection | None:
        for conn in self.list_connections():
            if conn.config.name == name:
                return conn
        return None

    def live_children(self) -> list[subprocess.Popen]:
        procs = []
        for conn in self.list_connections():
            for inst in conn.instances():
                if inst.process_alive():
                    procs.append(inst.proc)
        return procs

    # -- routing -----------------------------------------------------------

    def route_request(self, server_id: str, tool: str, arguments: dict | None, timeout_s: float | None = None) -> Any:
        conn = self.get(server_id)
        if conn is None or conn.state == STOPPED:
            raise NotFoundError(SERVER_NOT_FOUND_MSG)
        if not conn.capabilities.has_tool(tool):
            raise NotFoundError(TOOL_NOT_FOUND_MSG)
        if conn.state != HEALTHY:
            raise ServerUnavailableError(f"server {conn.config.name} is {conn.state}")
        timeout = timeout_s
        if timeout is None:
            timeout = (
                conn.config.request_timeout_ms / 1000.0
                if conn.config.request_timeout_ms is not None
                else self.request_timeout_s
            )
        instance = conn.next_instance()
        fut = instance.submit("tools/call", {"name": tool, "arguments": arguments or {}}, timeout)
        try:
            # The dispatcher owns the real deadline; this bound only
            # covers queue time ahead of us plus a margin.
            return fut.result(timeout=timeout * (instance.queue_depth + 2) + 10)
        except concurrent.futures.TimeoutError:
            raise RpcTimeoutError(f"request to {conn.config.name}/{tool} timed out in queue")
        except TransportClosedError as exc:
            raise ServerUnavailableError(f"server {conn.config.name} failed mid-request: {exc}") from exc

    # -- supervision -------------------------------------------------------

    def heartbeat_tick(self) -> list[tuple[str, str]]:
        """Ping every healthy connection once; demote the silent ones."""
        now = time.monotonic()
        targets = [c for c in self.list_connections() if c.state == HEALTHY]

        def ping(conn: ServerConnection) -> None:
            try:
                for inst in conn.instances():
                    inst.client.call("ping", None, timeout=self.ping_deadline_s)
                conn.last_heartbeat = now
            except Exception:
                conn.mark_degraded()

        threads = [threading.Thread(target=ping, args=(c,), daemon=True) for c in targets]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=self.ping_deadline_s * 2 + 5)
        return [(c.id, c.state) for c in self.list_connections()]

    def reconnect(self, server_id: str) -> ServerConnection:
        """Respawn a degraded server under its existing id."""
        conn = self.get(server_id)
        if conn is None:
            raise NotFoundError(SERVER_NOT_FOUND_MSG)
        if conn.state == HEALTHY:
            return conn
        if conn.state == STOPPED:
            raise ServerStoppedError(f"server {conn.config.name} is stopped")

        conn.reconnecting = True
        try:
            last_error: Exception | None = None
            for attempt, delay in enumerate(self.backoff.delays(), start=1):
                time.sleep(delay)
                if conn.state == STOPPED:  # stopped while we were waiting
                    raise ServerStoppedError(f"server {conn.config.name} is stopped")
                try:
                    instances: list[ServerInstance] = []
                    capabilities = None
                    for i in range(conn.config.pool_size):
                        instance, caps = self._spawn_instance(conn.config, i)
                        instances.append(instance)
                        if capabilities is None:
                            capabilities = caps
                except Exception as exc:
                    for inst in instances:
                        inst.close(grace_s=0.5)
                    last_error = exc
                    logger.warning(
                        "reconnect %s attempt %d/%d failed: %s",
                        conn.config.name,
                        attempt,
                        self.backoff.max_attempts,
                        exc,
                    )
                    continue
                old = conn.swap_instances(instances, capabilities)
                for inst in old:
                    inst.close(grace_s=0.5)
                conn.set_state(HEALTHY)
                logger.info("server %s (%s) reconnected", conn.config.name, conn.id)
                return conn
            conn.set_state(STOPPED)
            raise ConnectError(CONNECT_FAILED_MSG) from last_error
        finally:
            conn.reconnecting = False

    def start_monitor(self) -> None:
        if self._monitor is not None and self._monitor.is_alive():
            return
        self._stop_monitor.clear()

        def loop() -> None:
            while not self._stop_monitor.wait(self.heartbeat_interval_s):
                try:
                    self.heartbeat_tick()
                except Exception:
                    logger.exception("heartbeat tick failed")
                for conn in self.list_connections():
                    if conn.state == DEGRADED and not conn.reconnecting:
                        threading.Thread(
                            target=self._reconnect_quietly, args=(conn.id,), daemon=True
                        ).start()

        self._monitor = threading.Thread(target=loop, name="bridge-monitor", daemon=True)
        self._monitor.start()

    def _reconnect_quietly(self, server_id: str) -> None:
        try:
            self.reconnect(server_id)
        except Exception as exc:
            logger.warning("automatic reconnect of %s failed: %s", server_id, exc)

    def stop_monitor(self) -> None:
        self._stop_monitor.set()
        if self._monitor is not None:
            self._monitor.join(timeout=5)
            self._monitor = None


def _kill_quietly(proc: subprocess.Popen) -> None:
    try:
        proc.kill()
    except OSError:
        pass
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        pass
