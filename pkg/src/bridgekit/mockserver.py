"""Deterministic stdio tool servers for tests and benchmarks.

A behavior document (JSON) declares the tools a mock advertises and how
each one acts. Handlers are pure given their inputs, so identical
request sequences produce identical responses; the counter handler
appends one byte to a file per execution, which makes execution counts
observable from outside the process without asking the mock itself.

Fault switches cover the failure modes the supervisor has to survive:
    crashAfterN     exit hard after the Nth tools/call response
    hangOnInit      never answer initialize
    malformedEveryK corrupt every Kth response line

Run directly:  python -m bridgekit.mockserver --behavior '<json or path>'
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .protocol import (
    NOTIFICATION,
    REQUEST,
    RpcMessage,
    decode_frame,
    encode_frame,
)

_SUM_SCHEMA = {
    "type": "object",
    "properties": {"a": {"type": "number"}, "b": {"type": "number"}},
    "required": ["a", "b"],
}
_ANY_SCHEMA = {"type": "object"}


def _tool_descriptor(spec: dict) -> dict:
    handler = spec.get("handler", "echo")
    schema = _SUM_SCHEMA if handler == "sum" else _ANY_SCHEMA
    return {
        "name": spec["name"],
        "description": spec.get("description", f"{handler} handler"),
        "inputSchema": spec.get("inputSchema", schema),
    }


class MockServer:
    """One stdio mock. Reads frames from stdin, answers on stdout."""

    def __init__(self, behavior: dict, stdin=None, stdout=None):
        self.behavior = behavior
        self.tools = {t["name"]: t for t in behavior.get("tools", [])}
        faults = behavior.get("faults", {})
        self.crash_after_n = int(faults.get("crashAfterN", 0))
        self.hang_on_init = bool(faults.get("hangOnInit", False))
        self.malformed_every_k = int(faults.get("malformedEveryK", 0))
        self._stdin = stdin if stdin is not None else sys.stdin.buffer
        self._stdout = stdout if stdout is not None else sys.stdout.buffer
        self._responses_sent = 0
        self._calls_handled = 0

    def serve_forever(self) -> None:
        for line in iter(self._stdin.readline, b""):
            if not line.strip():
                continue
            try:
                msg = decode_frame(line)
            except Exception:
                continue  # garbage in, silence out; the stream stays usable
            if msg.kind == NOTIFICATION:
                continue
            if msg.kind != REQUEST:
                continue
            self._handle(msg)

    def _handle(self, msg: RpcMessage) -> None:
        method = msg.method
        if method == "initialize":
            if self.hang_on_init:
                while True:
                    time.sleep(3600)
            self._reply(
                RpcMessage.response(
                    msg.id,
                    {
                        "protocolVersion": "2024-11-05",
                        "capabilities": {"tools": {}},
                        "serverInfo": {"name": self.behavior.get("name", "mock"), "version": "0.1.0"},
                    },
                )
            )
        elif method == "tools/list":
            listing = [_tool_descriptor(t) for t in self.behavior.get("tools", [])]
            self._reply(RpcMessage.response(msg.id, {"tools": listing}))
        elif method == "resources/list":
            self._reply(RpcMessage.response(msg.id, {"resources": self.behavior.get("resources", [])}))
        elif method == "prompts/list":
            self._reply(RpcMessage.response(msg.id, {"prompts": self.behavior.get("prompts", [])}))
        elif method == "ping":
            self._reply(RpcMessage.response(msg.id, {}))
        elif method == "tools/call":
            self._handle_call(msg)
        else:
            self._reply(RpcMessage.error_response(msg.id, -32601, "Method not found"))

    def _handle_call(self, msg: RpcMessage) -> None:
        params = msg.params if isinstance(msg.params, dict) else {}
        name = params.get("name")
        arguments = params.get("arguments") or {}
        spec = self.tools.get(name)
        if spec is None:
            self._reply(RpcMessage.error_response(msg.id, -32602, f"Unknown tool: {name}"))
            return
        handler = spec.get("handler", "echo")
        if handler == "echo":
            reply = RpcMessage.response(msg.id, arguments)
        elif handler == "sum":
            a, b = arguments.get("a"), arguments.get("b")
            if isinstance(a, (int, float)) and isinstance(b, (int, float)):
                reply = RpcMessage.response(msg.id, a + b)
            else:
                reply = RpcMessage.error_response(msg.id, -32602, "sum needs numeric a and b")
        elif handler == "sleep":
            ms = arguments.get("ms", spec.get("ms", 100))
            time.sleep(float(ms) / 1000.0)
            reply = RpcMessage.response(msg.id, {"slept": ms})
        elif handler == "fail":
            reply = RpcMessage.error_response(
                msg.id, int(spec.get("code", -32000)), spec.get("message", "simulated failure")
            )
        elif handler == "counter":
            count = self._bump_counter(spec)
            reply = RpcMessage.response(msg.id, {"count": count})
        else:
            reply = RpcMessage.error_response(msg.id, -32603, f"bad handler: {handler}")

        self._calls_handled += 1
        self._reply(reply)
        if self.crash_after_n and self._calls_handled >= self.crash_after_n:
            self._stdout.flush()
            os._exit(1)

    def _bump_counter(self, spec: dict) -> int:
        path = spec.get("counterFile")
        if not path:
            return -1
        # O_APPEND keeps concurrent instances from losing increments.
        with open(path, "ab") as fh:
            fh.write(b"x")
        return os.path.getsize(path)

    def _reply(self, msg: RpcMessage) -> None:
        self._responses_sent += 1
        if self.malformed_every_k and self._responses_sent % self.malformed_every_k == 0:
            self._stdout.write(b'{"jsonrpc": "2.0", this line is intentionally broken\n')
        else:
            self._stdout.write(encode_frame(msg))
        self._stdout.flush()


def load_behavior(source: str) -> dict:
    """Accept inline JSON or a path to a JSON file."""
    text = source.strip()
    if text.startswith("{"):
        return json.loads(text)
    with open(source, "r", encoding="utf-8") as fh:
        return json.load(fh)


def counter_value(path: str) -> int:
    """Out-of-band execution count for a counter tool's file."""
    try:
        return os.path.getsize(path)
    except OSError:
        return 0


def scripted_llm(responses):
    """Model backend that replays canned responses in order."""
    from .agent import ScriptedLlm

    return ScriptedLlm(list(responses))


def mock_command(behavior: dict) -> tuple[str, list[str]]:
    """Command + args that launch a mock with this behavior."""
    return sys.executable, ["-m", "bridgekit.mockserver", "--behavior", json.dumps(behavior)]


def _files_behavior(state_dir: str) -> dict:
    return {
        "name": "files",
        "tools": [
            {"name": "list_dir", "handler": "echo", "description": "List entries under a path"},
            {"name": "read_item", "handler": "echo", "description": "Read one stored item"},
            {"name": "write_item", "handler": "echo", "description": "Write one stored item"},
            {
                "name": "hits",
                "handler": "counter",
                "counterFile": os.path.join(state_dir, "files-hits.count"),
                "description": "Count executions",
            },
        ],
        "resources": [{"uri": "mock://files/root", "name": "root"}],
        "prompts": [],
    }


def default_fleet_behaviors(state_dir: str) -> dict[str, dict]:
    """The stock four-server topology: one implementation exposed at risk
    levels 1 and 2, plus a store-style and a utility-style server."""
    files = _files_behavior(state_dir)
    files_medium = json.loads(json.dumps(files))
    files_medium["name"] = "files-medium"
    for tool in files_medium["tools"]:
        if tool["handler"] == "counter":
            tool["counterFile"] = os.path.join(state_dir, "files-medium-hits.count")
    store = {
        "name": "store",
        "tools": [
            {"name": "put", "handler": "echo", "description": "Store a value"},
            {"name": "get", "handler": "echo", "description": "Fetch a value"},
            {
                "name": "tally",
                "handler": "counter",
                "counterFile": os.path.join(state_dir, "store-tally.count"),
                "description": "Count executions",
            },
        ],
        "resources": [],
        "prompts": [{"name": "summarize", "description": "Summarize stored values"}],
    }
    extra = {
        "name": "extra",
        "tools": [
            {"name": "echo", "handler": "echo", "description": "Echo arguments back"},
            {"name": "get_sum", "handler": "sum", "description": "Add two numbers"},
        ],
        "resources": [],
        "prompts": [],
    }
    return {"files": files, "files-medium": files_medium, "store": store, "extra": extra}


def default_fleet_config(state_dir: str) -> dict:
    """Bridge config for the stock fleet, counters kept under state_dir."""
    behaviors = default_fleet_behaviors(state_dir)
    servers: dict[str, dict] = {}
    for name, behavior in behaviors.items():
        command, args = mock_command(behavior)
        servers[name] = {
            "command": command,
            "args": args,
            "riskLevel": 2 if name == "files-medium" else 1,
        }
    return {"mcpServers": servers}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bridgekit-mock", description=__doc__)
    parser.add_argument("--behavior", required=True, help="behavior JSON (inline or a file path)")
    opts = parser.parse_args(argv)
    MockServer(load_behavior(opts.behavior)).serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
