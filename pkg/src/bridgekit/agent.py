"""Interactive agent loop: discover tools, let a model call them, answer.

One turn is two model invocations. The first sees the tool catalog and
the query and may emit tool calls; each call is executed through the
bridge, with level-2 calls pausing for operator approval. The second
invocation sees the gathered results and produces the final answer.
A declined confirmation contributes a fixed cancellation record and
nothing executes for it.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import requests

from .errors import LlmBackendError
from .evaluation import ToolCall, extract_tool_calls, normalize_name

logger = logging.getLogger(__name__)

DEFAULT_MCP_URL = "http://localhost:3000"
DEFAULT_JSON_WIDTH = 100
DEFAULT_MAX_TOOL_CALLS = 16

CANCELLED_RESULT = {"status": "cancelled", "message": "User cancelled operation"}

TOOL_CALL_INSTRUCTIONS = """To use a tool, reply with one block per call, exactly in this form:
<tool_call>
{"name": "tool_name", "arguments": {"arg1": "value"}}
</tool_call>
If no tool is needed, answer directly."""


@dataclass(frozen=True)
class PromptSpec:
    max_tools: int = 40
    max_description_chars: int = 160
    header: str = "Available Tools"
    ellipsis: str = "..."


@dataclass(frozen=True)
class AgentTool:
    server_id: str
    server_name: str
    name: str
    description: str = ""


class LlmBackend:
    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class ScriptedLlm(LlmBackend):
    """Replays canned responses; the test double for the loop."""

    def __init__(self, responses: list[str]):
        self._responses = list(responses)
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if not self._responses:
            raise LlmBackendError("scripted backend ran out of responses")
        return self._responses.pop(0)


class HttpLlm(LlmBackend):
    """Chat-completions style HTTP backend."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "", timeout_s: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if not key:
                raise LlmBackendError(f"environment variable {self.api_key_env} is empty")
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "messages": [{"role": "user", "content": prompt}]},
                headers=headers,
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            raise LlmBackendError(f"model backend failed: {exc}") from exc


def fetch_available_tools(mcp_url: str, session: requests.Session | None = None) -> list[AgentTool]:
    """Tool catalog across every registered server, with owners."""
    http = session or requests
    base = mcp_url.rstrip("/")
    servers = http.get(f"{base}/servers", timeout=10).json()
    tools: list[AgentTool] = []
    for server in servers:
        listing = http.get(f"{base}/servers/{server['id']}/tools", timeout=10)
        if listing.status_code != 200:
            logger.warning("skipping server %s: tools listing -> %d", server.get("name"), listing.status_code)
            continue
        for t in listing.json():
            tools.append(
                AgentTool(
                    server_id=server["id"],
                    server_name=server.get("name", ""),
                    name=t["name"],
                    description=t.get("description", ""),
                )
            )
    return tools


def build_prompt(query: str, tools: list[AgentTool], spec: PromptSpec | None = None) -> str:
    spec = spec or PromptSpec()
    lines = [f"{spec.header}:"]
    for tool in tools[: spec.max_tools]:
        desc = tool.description or ""
        if len(desc) > spec.max_description_chars:
            desc = desc[: spec.max_description_chars - len(spec.ellipsis)] + spec.ellipsis
        lines.append(f"- {tool.name}: {desc}" if desc else f"- {tool.name}")
    catalog = "\n".join(lines)
    return f"{catalog}\n\n{TOOL_CALL_INSTRUCTIONS}\n\nUser query: {query}"


def render_result(result, hide_json: bool = False, width: int = DEFAULT_JSON_WIDTH) -> str:
    """Pretty JSON wrapped to the width; hide_json collapses everything
    to a single summary line."""
    text = json.dumps(result, indent=2, sort_keys=True)
    if hide_json:
        return f"[tool result hidden: {len(text)} chars]"
    out: list[str] = []
    for line in text.splitlines():
        if len(line) <= width:
            out.append(line)
        else:
            out.extend(line[i : i + width] for i in range(0, len(line), width))
    return "\n".join(out)


@dataclass
class TurnResult:
    final_text: str
    calls: list[ToolCall] = field(default_factory=list)
    results: list[dict] = field(default_factory=list)


def execute_call(
    base_url: str,
    tool: AgentTool,
    arguments: dict,
    operator: Callable[[dict], bool] | None,
    session: requests.Session | None = None,
) -> dict:
    """One call through the bridge, including the confirmation leg.

    With no operator wired in, a confirmation request is declined; the
    loop never auto-approves a level-2 call.
    """
    http = session or requests
    resp = http.post(f"{base_url}/servers/{tool.server_id}/tools/{tool.name}", json=arguments, timeout=60)
    try:
        body = resp.json()
    except ValueError:
        return {"status": "error", "httpStatus": resp.status_code, "message": "non-JSON reply from bridge"}
    if resp.status_code == 202 and body.get("status") == "confirmation_required":
        approved = bool(operator(body)) if operator is not None else False
        if not approved:
            try:
                http.post(
                    f"{base_url}/confirmations/{body['confirmationId']}",
                    json={"token": body["token"], "decision": "reject"},
                    timeout=60,
                )
            except requests.RequestException:
                pass  # the entry expires on its own; the cancellation stands
            return dict(CANCELLED_RESULT)
        confirm = http.post(
            f"{base_url}/confirmations/{body['confirmationId']}",
            json={"token": body["token"], "decision": "approve"},
            timeout=60,
        )
        try:
            confirm_body = confirm.json()
        except ValueError:
            confirm_body = {}
        if confirm.status_code != 200:
            return {
                "status": "error",
                "httpStatus": confirm.status_code,
                "message": confirm_body.get("error", {}).get("message", "confirmation failed"),
            }
        return confirm_body
    if resp.status_code != 200:
        return {
            "status": "error",
            "httpStatus": resp.status_code,
            "message": body.get("error", {}).get("message", "request failed"),
        }
    return body


def run_turn(
    query: str,
    mcp_url: str = DEFAULT_MCP_URL,
    llm: LlmBackend | None = None,
    operator: Callable[[dict], bool] | None = None,
    max_tool_calls: int = DEFAULT_MAX_TOOL_CALLS,
    prompt_spec: PromptSpec | None = None,
    session: requests.Session | None = None,
) -> TurnResult:
    """One full agent turn. results has one entry per emitted call, in
    order, counting errors and cancellations."""
    if llm is None:
        raise ValueError("run_turn needs a model backend")
    base = mcp_url.rstrip("/")
    tools = fetch_available_tools(base, session=session)
    first = llm.complete(build_prompt(query, tools, prompt_spec))
    calls = extract_tool_calls(first)
    if len(calls) > max_tool_calls:
        logger.warning("model emitted %d calls; capping at %d", len(calls), max_tool_calls)
        calls = calls[:max_tool_calls]
    if not calls:
        return TurnResult(final_text=first)

    by_name: dict[str, AgentTool] = {}
    for tool in tools:
        by_name.setdefault(normalize_name(tool.name), tool)

    results: list[dict] = []
    for call in calls:
        target = by_name.get(normalize_name(call.name))
        if target is None:
            results.append({"status": "error", "message": f"Unknown tool: {call.name}"})
            continue
        results.append(execute_call(base, target, call.arguments, operator, session=session))

    followup = (
        f"Tool results, in call order:\n{json.dumps(results, indent=2, sort_keys=True)}\n\n"
        f"Using these results, answer the user query: {query}"
    )
    try:
        final = llm.complete(followup)
    except LlmBackendError as exc:
        exc.partial_results = results
        raise
    return TurnResult(final_text=final, calls=calls, results=results)
