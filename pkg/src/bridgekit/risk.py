"""Risk classification, human confirmation, and sandboxed execution.

Level 1 calls run directly, level 2 calls park in the confirmation
store until an operator approves them, level 3 calls run inside an
isolation backend. A confirmation entry is single use: the first
resolve attempt that presents the right token removes it atomically,
so concurrent approvals cannot double-execute. Misses are externally
indistinguishable (unknown id, wrong token, and expired entry all
surface the same not-found error); the precise cause is only logged.
"""

from __future__ import annotations

import copy
import hmac
import logging
import os
import secrets
import shutil
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable

from .errors import (
    NotFoundError,
    ResourceExhaustedError,
    RpcTimeoutError,
    SandboxError,
    SandboxTimeoutError,
    SandboxUnavailableError,
    TransportError,
)
from .transport import RpcClient, StdioTransport, call_tool

logger = logging.getLogger(__name__)

DIRECT = 1
CONFIRM = 2
SANDBOX = 3

DEFAULT_TTL_S = 300.0
MAX_PENDING = 10_000

INVALID_CONFIRMATION_MSG = "Invalid confirmation ID or expired request"


def rfc3339(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


@dataclass(frozen=True)
class SandboxSpec:
    """Isolation parameters for level-3 execution."""

    image: str = ""
    memory_limit_mb: int = 512
    network: str = "none"
    volumes: tuple[str, ...] = ()
    timeout_sec: float = 60.0

    @classmethod
    def from_dict(cls, data: dict | None) -> "SandboxSpec":
        data = data or {}
        return cls(
            image=str(data.get("image", "")),
            memory_limit_mb=int(data.get("memoryLimitMb", 512)),
            network=str(data.get("network", "none")),
            volumes=tuple(data.get("volumes", ())),
            timeout_sec=float(data.get("timeoutSec", 60.0)),
        )

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "memoryLimitMb": self.memory_limit_mb,
            "network": self.network,
            "volumes": list(self.volumes),
            "timeoutSec": self.timeout_sec,
        }


def classify_risk(config, tool: str) -> int:
    """Per-tool override first, then the server's level."""
    override = getattr(config, "tool_risk", {}).get(tool)
    return int(override) if override is not None else int(config.risk_level)


@dataclass
class PendingConfirmation:
    id: str
    token: str
    server_id: str
    tool: str
    params: dict
    risk_level: int
    created_at: float
    expires_at: float

    def to_response(self) -> dict:
        return {
            "status": "confirmation_required",
            "confirmationId": self.id,
            "token": self.token,
            "expiresAt": rfc3339(self.expires_at),
            "riskLevel": self.risk_level,
        }


class ConfirmationStore:
    """Bounded in-memory store of pending level-2 calls."""

    def __init__(
        self,
        ttl_s: float = DEFAULT_TTL_S,
        max_pending: int = MAX_PENDING,
        clock: Callable[[], float] = time.time,
    ):
        self.ttl_s = ttl_s
        self.max_pending = max_pending
        self._clock = clock
        self._lock = threading.Lock()
        self._entries: dict[str, PendingConfirmation] = {}

    def create(self, server_id: str, tool: str, params: dict, risk_level: int = CONFIRM) -> PendingConfirmation:
        now = self._clock()
        with self._lock:
            self._purge_locked(now)
            if len(self._entries) >= self.max_pending:
                raise ResourceExhaustedError("confirmation store is full")
            entry = PendingConfirmation(
                id=str(uuid.uuid4()),
                token=secrets.token_hex(16),
                server_id=server_id,
                tool=tool,
                # Frozen at creation: later mutation of the caller's dict
                # must not change what gets executed.
                params=copy.deepcopy(params or {}),
                risk_level=risk_level,
                created_at=now,
                expires_at=now + self.ttl_s,
            )
            self._entries[entry.id] = entry
            return entry

    def claim(self, confirmation_id: str, token: str) -> PendingConfirmation:
        """Atomically remove and return the entry, or raise not-found.

        Wrong token and expired entry intentionally match the unknown-id
        error so callers cannot probe for live confirmation ids.
        """
        now = self._clock()
        with self._lock:
            entry = self._entries.get(confirmation_id)
            if entry is None:
                logger.info("confirmation %s unknown", confirmation_id)
                raise NotFoundError(INVALID_CONFIRMATION_MSG)
            if not hmac.compare_digest(entry.token, token or ""):
                logger.info("Invalid confirmation token for %s", confirmation_id)
                raise NotFoundError(INVALID_CONFIRMATION_MSG)
            if entry.expires_at <= now:
                del self._entries[confirmation_id]
                logger.info("Confirmation expired: %s", confirmation_id)
                raise NotFoundError(INVALID_CONFIRMATION_MSG)
            del self._entries[confirmation_id]
            return entry

    def purge_expired(self, now: float | None = None) -> int:
        with self._lock:
            return self._purge_locked(self._clock() if now is None else now)

    def _purge_locked(self, now: float) -> int:
        dead = [cid for cid, e in self._entries.items() if e.expires_at <= now]
        for cid in dead:
            del self._entries[cid]
        return len(dead)

    def pending_count(self) -> int:
        with self._lock:
            self._purge_locked(self._clock())
            return len(self._entries)


class SubprocessSandbox:
    """Mock isolation backend: a fresh, resource-limited child process.

    Stands in for the container backend where no runtime exists. The
    fresh process per call gives state isolation; memory is capped via
    rlimits where the platform allows it. Not a security boundary.
    """

    name = "subprocess"

    def available(self) -> bool:
        return True

    def run(self, command: str, args: list[str], env: dict, spec: SandboxSpec, tool: str, arguments: dict) -> Any:
        full_env = os.environ.copy()
        full_env.update(env or {})
        preexec = _rlimit_hook(spec.memory_limit_mb)
        try:
            proc = subprocess.Popen(
                [command, *args],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                env=full_env,
                preexec_fn=preexec,
            )
        except OSError as exc:
            raise SandboxError(f"sandboxed server failed to start: {exc}") from exc
        return _one_shot_call(proc, tool, arguments, spec.timeout_sec)


class ContainerSandbox:
    """Container-runtime backend; shells out to docker (or compatible)."""

    name = "container"

    def __init__(self, runtime: str = "docker"):
        self.runtime = runtime

    def available(self) -> bool:
        return shutil.which(self.runtime) is not None

    def build_argv(self, command: str, args: list[str], env: dict, spec: SandboxSpec) -> list[str]:
        argv = [
            self.runtime,
            "run",
            "--rm",
            "-i",
            "--network",
            spec.network or "none",
            "--memory",
            f"{spec.memory_limit_mb}m",
        ]
        for volume in spec.volumes:
            argv += ["-v", volume]
        for key, value in (env or {}).items():
            argv += ["-e", f"{key}={value}"]
        argv.append(spec.image)
        if command:
            argv.append(command)
        argv += list(args)
        return argv

    def run(self, command: str, args: list[str], env: dict, spec: SandboxSpec, tool: str, arguments: dict) -> Any:
        if not spec.image:
            raise SandboxUnavailableError("container sandbox requires an image")
        argv = self.build_argv(command, args, env, spec)
        try:
            proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise SandboxUnavailableError(f"container runtime failed: {exc}") from exc
        return _one_shot_call(proc, tool, arguments, spec.timeout_sec)


def _rlimit_hook(memory_limit_mb: int):
    try:
        import resource
    except ImportError:
        return None

    limit = memory_limit_mb * 1024 * 1024

    def apply() -> None:
        try:
            resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
        except (ValueError, OSError):
            pass

    return apply


def _one_shot_call(proc: subprocess.Popen, tool: str, arguments: dict, timeout_s: float) -> Any:
    """initialize + tools/call + teardown, all within one deadline.

    The process is killed in every exit path; a timeout never leaves an
    orphan behind.
    """
    deadline = time.monotonic() + timeout_s

    def remaining() -> float:
        return max(0.01, deadline - time.monotonic())

    client: RpcClient | None = None
    try:
        client = RpcClient(StdioTransport(proc))
        client.call(
            "initialize",
            {"protocolVersion": "2024-11-05", "capabilities": {}, "clientInfo": {"name": "bridgekit-sandbox", "version": "0.1.0"}},
            timeout=remaining(),
        )
        client.notify("notifications/initialized")
        return call_tool(client, tool, arguments, timeout=remaining())
    except RpcTimeoutError as exc:
        raise SandboxTimeoutError(f"sandboxed call exceeded {timeout_s}s") from exc
    except TransportError as exc:
        raise SandboxError(f"sandboxed server failed: {exc}") from exc
    finally:
        if client is not None:
            client.close()
        try:
            proc.kill()
        except OSError:
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


class RiskEngine:
    """Ties classification, the confirmation store, and sandboxing together."""

    def __init__(
        self,
        manager,
        store: ConfirmationStore | None = None,
        sandbox_backend=None,
        clock: Callable[[], float] = time.time,
    ):
        self.manager = manager
        self.store = store or ConfirmationStore(clock=clock)
        self.sandbox_backend = sandbox_backend or ContainerSandbox()

    def classify(self, config, tool: str) -> int:
        return classify_risk(config, tool)

    def begin_confirmation(self, server_id: str, tool: str, params: dict, risk_level: int = CONFIRM) -> PendingConfirmation:
        return self.store.create(server_id, tool, params, risk_level)

    def resolve(self, confirmation_id: str, token: str, decision: str) -> tuple[str, PendingConfirmation, Any]:
        """Returns ("executed", entry, result) or ("cancelled", entry, None).

        The entry is consumed either way; losers of an approval race get
        the same not-found error as a caller with a bogus id.
        """
        if decision not in ("approve", "reject"):
            raise ValueError(f"decision must be approve or reject, got {decision!r}")
        entry = self.store.claim(confirmation_id, token)
        if decision == "reject":
            logger.info("confirmation %s rejected; %s/%s not executed", entry.id, entry.server_id, entry.tool)
            return "cancelled", entry, None
        result = self.manager.route_request(entry.server_id, entry.tool, entry.params)
        return "executed", entry, result

    def execute_sandboxed(self, config, tool: str, arguments: dict) -> Any:
        """Run the call in the isolation backend; never fall back to direct."""
        backend = self.sandbox_backend
        if backend is None or not backend.available():
            raise SandboxUnavailableError(
                "no sandbox backend available; refusing to run a level-3 tool outside isolation"
            )
        spec = config.sandbox or SandboxSpec()
        return backend.run(config.command, list(config.args), dict(config.env), spec, tool, arguments)

    def pending_count(self) -> int:
        return self.store.pending_count()
