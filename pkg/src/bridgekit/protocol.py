"""JSON-RPC 2.0 message model and newline-delimited framing.

Every message crossing a transport is one UTF-8 JSON object on a single
line. Requests carry an id and a method, notifications a method only,
responses an id and exactly one of result / error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .errors import FrameDecodeError, FrameFormatError, ProtocolError

JSONRPC_VERSION = "2.0"

REQUEST = "request"
RESPONSE = "response"
NOTIFICATION = "notification"


@dataclass(frozen=True)
class RpcError:
    """Error member of a response, kept structurally close to the wire."""

    code: int
    message: str
    data: Any = None

    def to_wire(self) -> dict:
        obj: dict[str, Any] = {"code": self.code, "message": self.message}
        if self.data is not None:
            obj["data"] = self.data
        return obj

    @classmethod
    def from_wire(cls, obj: Any) -> "RpcError":
        if not isinstance(obj, dict):
            raise FrameFormatError("error member must be an object")
        code = obj.get("code")
        message = obj.get("message")
        if not isinstance(code, int) or isinstance(code, bool):
            raise FrameFormatError("error.code must be an integer")
        if not isinstance(message, str):
            raise FrameFormatError("error.message must be a string")
        return cls(code=code, message=message, data=obj.get("data"))


@dataclass(frozen=True)
class RpcMessage:
    kind: str
    id: int | str | None = None
    method: str | None = None
    params: Any = None
    result: Any = None
    error: RpcError | None = None

    @classmethod
    def request(cls, id: int | str, method: str, params: Any = None) -> "RpcMessage":
        return cls(kind=REQUEST, id=id, method=method, params=params)

    @classmethod
    def notification(cls, method: str, params: Any = None) -> "RpcMessage":
        return cls(kind=NOTIFICATION, method=method, params=params)

    @classmethod
    def response(cls, id: int | str, result: Any = None) -> "RpcMessage":
        return cls(kind=RESPONSE, id=id, result=result)

    @classmethod
    def error_response(cls, id: int | str, code: int, message: str, data: Any = None) -> "RpcMessage":
        return cls(kind=RESPONSE, id=id, error=RpcError(code, message, data))


def encode_frame(msg: RpcMessage) -> bytes:
    """Serialize to one newline-terminated line with a fixed key order."""
    obj: dict[str, Any] = {"jsonrpc": JSONRPC_VERSION}
    if msg.kind == REQUEST:
        if msg.id is None or not msg.method:
            raise FrameFormatError("request needs an id and a method")
        obj["id"] = msg.id
        obj["method"] = msg.method
        if msg.params is not None:
            obj["params"] = msg.params
    elif msg.kind == NOTIFICATION:
        if not msg.method:
            raise FrameFormatError("notification needs a method")
        obj["method"] = msg.method
        if msg.params is not None:
            obj["params"] = msg.params
    elif msg.kind == RESPONSE:
        if msg.id is None:
            raise FrameFormatError("response needs an id")
        obj["id"] = msg.id
        if msg.error is not None:
            obj["error"] = msg.error.to_wire()
        else:
            obj["result"] = msg.result
    else:
        raise FrameFormatError(f"unknown message kind: {msg.kind!r}")
    # allow_nan=False keeps the line strict JSON for any peer.
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def decode_frame(line: bytes | str) -> RpcMessage:
    """Parse one line back into a message.

    Malformed JSON raises FrameDecodeError carrying the offending line;
    structurally illegal messages raise FrameFormatError.
    """
    raw = line.encode("utf-8") if isinstance(line, str) else line
    text = raw.decode("utf-8", errors="replace").strip()
    if not text:
        raise FrameDecodeError("empty frame", raw)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FrameDecodeError(f"invalid JSON: {exc}", raw) from exc
    if not isinstance(obj, dict):
        raise FrameFormatError("frame must be a JSON object")

    msg_id = obj.get("id")
    if msg_id is not None and not isinstance(msg_id, (int, str)):
        raise FrameFormatError("id must be an integer or string")

    if "method" in obj:
        method = obj["method"]
        if not isinstance(method, str) or not method:
            raise FrameFormatError("method must be a non-empty string")
        params = obj.get("params")
        if params is not None and not isinstance(params, (dict, list)):
            raise FrameFormatError("params must be an object or array")
        if msg_id is None:
            return RpcMessage(kind=NOTIFICATION, method=method, params=params)
        return RpcMessage(kind=REQUEST, id=msg_id, method=method, params=params)

    if msg_id is None:
        raise FrameFormatError("frame has neither method nor id")
    has_result = "result" in obj
    has_error = "error" in obj
    if has_result and has_error:
        raise FrameFormatError("response carries both result and error")
    if not has_result and not has_error:
        raise FrameFormatError("response carries neither result nor error")
    if has_error:
        return RpcMessage(kind=RESPONSE, id=msg_id, error=RpcError.from_wire(obj["error"]))
    return RpcMessage(kind=RESPONSE, id=msg_id, result=obj["result"])


@dataclass(frozen=True)
class ToolDescriptor:
    """One tool as advertised by a server. `raw` is served back verbatim."""

    name: str
    description: str = ""
    input_schema: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_wire(cls, obj: Any) -> "ToolDescriptor":
        if not isinstance(obj, dict):
            raise FrameFormatError("tool descriptor must be an object")
        name = obj.get("name")
        if not isinstance(name, str) or not name:
            raise FrameFormatError("tool descriptor needs a non-empty name")
        description = obj.get("description") or ""
        schema = obj.get("inputSchema")
        return cls(
            name=name,
            description=description if isinstance(description, str) else "",
            input_schema=schema if isinstance(schema, dict) else {},
            raw=obj,
        )


@dataclass(frozen=True)
class Capabilities:
    """Merged discovery result for one server."""

    tools: tuple[ToolDescriptor, ...] = ()
    resources: tuple[dict, ...] = ()
    prompts: tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        names = [t.name for t in self.tools]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ProtocolError(f"duplicate tool names advertised: {', '.join(dupes)}")

    def tool_names(self) -> list[str]:
        return [t.name for t in self.tools]

    def has_tool(self, name: str) -> bool:
        return any(t.name == name for t in self.tools)
