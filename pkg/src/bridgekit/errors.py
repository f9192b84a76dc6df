"""Exception hierarchy shared across the bridge."""

from __future__ import annotations


class BridgeError(Exception):
    """Base class for every error raised by this package."""


class ProtocolError(BridgeError):
    """A frame violated the wire contract."""


class FrameDecodeError(ProtocolError):
    """Line was not valid JSON. Carries the offending bytes."""

    def __init__(self, message: str, line: bytes = b""):
        super().__init__(message)
        self.line = line


class FrameFormatError(ProtocolError):
    """Valid JSON that does not form a legal message."""


class TransportError(BridgeError):
    pass


class TransportClosedError(TransportError):
    """The underlying pipe or stream is gone."""


class RpcTimeoutError(TransportError):
    """No response arrived within the deadline."""


class ConfigError(BridgeError):
    """Server entry failed validation."""


class ConnectError(BridgeError):
    """Spawn or handshake failed."""


class NotFoundError(BridgeError):
    """Unknown server, tool, or confirmation."""


class ServerStoppedError(BridgeError):
    """Request arrived for a server that was shut down."""


class ServerUnavailableError(BridgeError):
    """Server exists but is not in a routable state."""


class ToolExecutionError(BridgeError):
    """Downstream server answered with a JSON-RPC error."""

    def __init__(self, message: str, code: int | None = None, data: object = None):
        super().__init__(message)
        self.code = code
        self.data = data


class ResourceExhaustedError(BridgeError):
    """A bounded store hit its limit."""


class SandboxError(BridgeError):
    pass


class SandboxUnavailableError(SandboxError):
    """Requested isolation backend cannot run here."""


class SandboxTimeoutError(SandboxError):
    """Sandboxed call exceeded its time budget."""


class LlmBackendError(BridgeError):
    """Model backend failed mid-turn. Carries any results gathered so far."""

    def __init__(self, message: str, partial_results: list | None = None):
        super().__init__(message)
        self.partial_results = partial_results or []
