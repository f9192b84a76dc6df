"""Acceptance suite: one test per shipped guarantee, numbered 1-11.

Each test prints a single PASS/FAIL verdict line for its criterion, and
several carry wall-clock budgets asserted inside the test itself. The
tests build their own fleets instead of sharing fixtures so that every
criterion stands alone.
"""

import functools
import json
import math
import random
import threading
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest
import requests

from bridgekit.agent import ScriptedLlm, run_turn
from bridgekit.bench import (
    MODE_BRIDGE_REST,
    MODE_STDIO_KEEPALIVE,
    MODE_STDIO_PERSPAWN,
    default_latency_ops,
    run_concurrency_suite,
    run_latency_suite,
)
from bridgekit.errors import (
    RpcTimeoutError,
    ServerStoppedError,
    ServerUnavailableError,
    TransportClosedError,
    TransportError,
)
from bridgekit.evaluation import (
    CORRECT,
    NO_TOOL_CALL,
    PARTIAL,
    TAGGED,
    WRONG_TOOL,
    bootstrap_ci,
    evaluate_output,
    extract_tool_calls,
    normalize_name,
    score_sample,
)
from bridgekit.gateway import Bridge, start_http
from bridgekit.manager import parse_config
from bridgekit.mockserver import counter_value, default_fleet_config, mock_command
from bridgekit.rewards import RewardConfig, total_reward


def criterion(num: int, label: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {num:>2}: FAIL  {label}")
                raise
            print(f"criterion {num:>2}: PASS  {label}")

        return run

    return wrap


@contextmanager
def live_bridge(config: dict):
    configs, settings = parse_config(config)
    settings.setdefault("sandboxBackend", "subprocess")
    bridge = Bridge(configs, settings=settings)
    bridge.start_all(strict=True)
    server, _ = start_http(bridge, port=0)
    try:
        yield bridge, f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        bridge.shutdown()
        assert bridge.manager.live_children() == []


def tag_block(name: str, arguments: dict | None = None) -> str:
    return "<tool_call>\n" + json.dumps({"name": name, "arguments": arguments or {}}) + "\n</tool_call>"


# -- 1 ----------------------------------------------------------------------

def _oracle(P: frozenset, G: frozenset):
    """Independent route: count the intersection by membership and use
    the identity f1 = 2|P&G| / (|P|+|G|) instead of the harmonic mean."""
    p, g = len(P), len(G)
    tp = sum(1 for x in P if x in G)
    if p == 0 and g == 0:
        return Fraction(1), Fraction(1), Fraction(1), True
    if p == 0:
        return Fraction(0), Fraction(0), Fraction(0), False
    precision = Fraction(tp, p)
    recall = Fraction(tp, g) if g else Fraction(0)
    f1 = Fraction(2 * tp, p + g)
    return precision, recall, f1, P == G


@criterion(1, "scoring matches the brute-force oracle on all 65,536 set pairs")
def test_criterion_01_metric_oracle():
    names = [f"t{i}" for i in range(8)]
    subsets = [frozenset(n for i, n in enumerate(names) if bits >> i & 1) for bits in range(256)]
    assert len(subsets) * len(subsets) == 65_536

    t0 = time.monotonic()
    for P in subsets:
        for G in subsets:
            s = score_sample(P, G)
            assert (s.precision, s.recall, s.f1, s.exact_match) == _oracle(P, G)
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0, f"oracle sweep took {elapsed:.2f}s"


# -- 2 ----------------------------------------------------------------------

GOLDEN_NORMALIZATIONS = [
    ("Server::tool_name", "tool_name"),
    ("Get-Weather", "get_weather"),
    ("mcp-search tool", "search_tool"),
    ("get_weather", "get_weather"),
    ("GET_WEATHER", "get_weather"),
    ("functions.get_weather", "get_weather"),
    ("mcp_get_weather", "get_weather"),
    ("mcp_mcp_get", "get"),
    ("functions.mcp_run", "run"),
    ("mcp-run", "run"),
    ("weather-tool", "weather"),
    ("weather-tool-tool", "weather"),
    ("Weather tool", "weather_tool"),
    ("weather_tool", "weather_tool"),
    ("a::b::c", "c"),
    ("ns::mcp-fetch", "fetch"),
    ("Files::Read-File", "read_file"),
    ("search  engine", "search_engine"),
    ("a--b", "a_b"),
    ("a - b", "a_b"),
    ("MCP_Search", "search"),
    ("functions.functions.call", "call"),
    ("-tool", "-tool"),
    ("mcp_", "mcp_"),
    ("", ""),
    ("A::-Tool", "a::-tool"),
    ("Browser::open-url-tool", "open_url"),
    ("fetch.data", "fetch.data"),
    ("mcp tool", "tool"),
    ("x-tool tool", "x_tool_tool"),
]

_FRAGMENTS = [
    "mcp_", "functions.", "-tool", "::", "-", " ", "_", ".",
    "get", "Weather", "TOOL", "mcp", "x", "A9", "Ww",
]


@criterion(2, "name normalization: golden table and idempotence on 10,000 strings")
def test_criterion_02_normalization():
    assert normalize_name("Server::tool_name") == "tool_name"
    for raw, expected in GOLDEN_NORMALIZATIONS:
        got = normalize_name(raw)
        assert got == expected, f"{raw!r} -> {got!r}, expected {expected!r}"
        assert normalize_name(got) == got

    rng = random.Random(20240917)
    for _ in range(10_000):
        pieces = [rng.choice(_FRAGMENTS) for _ in range(rng.randint(0, 8))]
        pieces += [chr(rng.randint(33, 126)) for _ in range(rng.randint(0, 4))]
        raw = "".join(pieces)
        once = normalize_name(raw)
        assert normalize_name(once) == once, f"not idempotent on {raw!r}"


# -- 3 ----------------------------------------------------------------------

VERBATIM_BLOCK = '<tool_call>\n{"name": "tool_name", "arguments": {"arg1": "...", "arg2": "..."}}\n</tool_call>'

# (model_output, ground_truth, failure class, format-heuristic flag)
LABELED_CORPUS = [
    (tag_block("get_weather"), ["get_weather"], CORRECT, False),
    (tag_block("Server::get_weather"), ["get_weather"], CORRECT, False),
    ('{"name": "get_weather", "arguments": {}}', ["get_weather"], CORRECT, True),
    ("I would check the weather report myself.", ["get_weather"], NO_TOOL_CALL, False),
    ("", ["get_weather"], NO_TOOL_CALL, False),
    ("<tool_call>{broken</tool_call>", ["get_weather"], NO_TOOL_CALL, False),
    (tag_block("send_email"), ["get_weather"], WRONG_TOOL, False),
    ('{"name": "send_email", "arguments": {}}', ["get_weather"], WRONG_TOOL, True),
    (tag_block("get_weather"), ["get_weather", "send_email"], PARTIAL, False),
    (tag_block("get_weather") + tag_block("translate"), ["get_weather"], PARTIAL, False),
    (tag_block("get_weather") + tag_block("translate"), ["get_weather", "send_email"], PARTIAL, False),
    (tag_block("get_weather") + tag_block("send_email"), ["get_weather", "send_email"], CORRECT, False),
    ("No tools are needed for small talk.", [], CORRECT, False),
    (tag_block("get_weather"), [], WRONG_TOOL, False),
    ('{"name": "a", "arguments": {}} and {"name": "b", "arguments": {}}', ["a", "b"], CORRECT, True),
    (tag_block("get_weather") + "<tool_call>{oops</tool_call>", ["get_weather"], CORRECT, False),
    ('<tool_call>{oops</tool_call> {"name": "get_weather", "arguments": {}}', ["get_weather"], CORRECT, True),
    (tag_block("get-weather-tool"), ["get_weather"], CORRECT, False),
    (tag_block("get_weather") + tag_block("get_weather"), ["get_weather"], CORRECT, False),
    ('{"name": "translate", "parameters": {"to": "fr"}}', ["get_weather"], WRONG_TOOL, True),
]


@criterion(3, "extraction: verbatim tagged block and 20 hand-labeled samples")
def test_criterion_03_extraction():
    calls = extract_tool_calls(VERBATIM_BLOCK)
    assert len(calls) == 1
    assert calls[0].name == "tool_name"
    assert calls[0].arguments == {"arg1": "...", "arg2": "..."}
    assert calls[0].source == TAGGED

    assert len(LABELED_CORPUS) == 20
    for output, truth, expected_class, expected_flag in LABELED_CORPUS:
        _, score = evaluate_output(output, truth)
        assert score.failure_class == expected_class, (output, score.failure_class)
        assert score.format_heuristic == expected_flag, (output, score.format_heuristic)

    # all five reporting columns are exercised
    classes = {c for _, _, c, _ in LABELED_CORPUS}
    assert classes == {CORRECT, NO_TOOL_CALL, WRONG_TOOL, PARTIAL}
    assert any(flag for *_, flag in LABELED_CORPUS)


# -- 4 ----------------------------------------------------------------------

@criterion(4, "exactly-once: 50 concurrent approvals -> 1 execution, 49x 404")
def test_criterion_04_exactly_once(tmp_path):
    counter = str(tmp_path / "tick.count")
    command, args = mock_command(
        {"name": "vault", "tools": [{"name": "tick", "handler": "counter", "counterFile": counter}]}
    )
    config = {"mcpServers": {"vault": {"command": command, "args": args, "riskLevel": 2}}}

    t0 = time.monotonic()
    with live_bridge(config) as (bridge, url):
        sid = bridge.list_servers()[0]["id"]
        pending = requests.post(f"{url}/servers/{sid}/tools/tick", json={}, timeout=10).json()
        body = {"token": pending["token"], "decision": "approve"}

        statuses: list[int] = []
        lock = threading.Lock()
        barrier = threading.Barrier(50)

        def approve() -> None:
            barrier.wait()
            resp = requests.post(f"{url}/confirmations/{pending['confirmationId']}", json=body, timeout=30)
            with lock:
                statuses.append(resp.status_code)

        threads = [threading.Thread(target=approve) for _ in range(50)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=20)
        assert not any(t.is_alive() for t in threads)

        assert sorted(statuses) == [200] + [404] * 49
        assert counter_value(counter) == 1
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0, f"exactly-once race took {elapsed:.2f}s"


# -- 5 ----------------------------------------------------------------------

@criterion(5, "risk levels 1/2/3 -> direct 200 / 202 / sandboxed 200, no path mixing")
def test_criterion_05_branch_totality():
    behavior = {"name": "s", "tools": [{"name": "echo", "handler": "echo"}]}
    servers = {}
    for name, level in (("low", 1), ("mid", 2), ("high", 3)):
        command, args = mock_command(dict(behavior, name=name))
        servers[name] = {"command": command, "args": args, "riskLevel": level}

    with live_bridge({"mcpServers": servers}) as (bridge, url):
        ids = {row["name"]: row["id"] for row in requests.get(f"{url}/servers", timeout=10).json()}

        direct = requests.post(f"{url}/servers/{ids['low']}/tools/echo", json={"n": 1}, timeout=10)
        assert direct.status_code == 200
        assert direct.json() == {"serverId": ids["low"], "tool": "echo", "result": {"n": 1}}

        gated = requests.post(f"{url}/servers/{ids['mid']}/tools/echo", json={"n": 2}, timeout=10)
        assert gated.status_code == 202
        assert gated.json()["status"] == "confirmation_required"
        assert gated.json()["riskLevel"] == 2

        boxed = requests.post(f"{url}/servers/{ids['high']}/tools/echo", json={"n": 3}, timeout=30)
        assert boxed.status_code == 200
        assert boxed.json()["result"] == {"n": 3}

        assert bridge.path_counts() == {"direct": 1, "confirmation": 1, "sandbox": 1}

        for i in range(3):
            requests.post(f"{url}/servers/{ids['high']}/tools/echo", json={"i": i}, timeout=30)
        counts = bridge.path_counts()
        assert counts["sandbox"] == 4
        assert counts["direct"] == 1, "a level-3 request leaked onto the direct path"


# -- 6 ----------------------------------------------------------------------

@criterion(6, "concurrency sweep {1,5,10,20,50} x 100: zero errors, throughput(5) > throughput(1)")
def test_criterion_06_concurrency_sweep():
    # Four servers whose tool carries a few ms of service time, the regime
    # concurrency exists for. Each mock serializes its own requests, so the
    # gain must come from overlapping distinct servers.
    servers = {}
    for i in range(4):
        command, args = mock_command({"name": f"svc{i}", "tools": [{"name": "work", "handler": "sleep"}]})
        servers[f"svc{i}"] = {"command": command, "args": args, "riskLevel": 1}

    t0 = time.monotonic()
    with live_bridge({"mcpServers": servers}) as (bridge, url):
        ids = {row["name"]: row["id"] for row in bridge.list_servers()}
        targets = [(ids[f"svc{i}"], "work", {"ms": 4}) for i in range(4)]
        records = run_concurrency_suite(url, targets, levels=(1, 5, 10, 20, 50), requests_per_level=100)

    by_level = {r.concurrency: r for r in records}
    assert set(by_level) == {1, 5, 10, 20, 50}
    for level, record in by_level.items():
        assert record.errors == 0, f"level {level} saw {record.errors} errors"
        assert record.total_requests == 100
    assert by_level[5].requests_per_sec > by_level[1].requests_per_sec
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"sweep took {elapsed:.2f}s"


# -- 7 ----------------------------------------------------------------------

@criterion(7, "latency ordering: rest < per-spawn per op; rest overhead over keep-alive positive")
def test_criterion_07_latency_ordering(tmp_path):
    config = default_fleet_config(str(tmp_path / "state"))
    with live_bridge(config) as (bridge, url):
        ops = default_latency_ops(bridge)
        assert len(ops) >= 3
        records = run_latency_suite(ops, iterations=10, runs=2, bridge_url=url)

    by_op: dict[str, dict[str, float]] = {}
    for record in records:
        by_op.setdefault(record.operation, {})[record.mode] = record.mean_ms

    for op, means in by_op.items():
        rest = means[MODE_BRIDGE_REST]
        keepalive = means[MODE_STDIO_KEEPALIVE]
        perspawn = means[MODE_STDIO_PERSPAWN]
        assert rest < perspawn, f"{op}: rest {rest:.3f}ms not below per-spawn {perspawn:.3f}ms"
        overhead = rest - keepalive
        assert math.isfinite(overhead)
        assert overhead > 0, f"{op}: overhead {overhead:.3f}ms not positive"


# -- 8 ----------------------------------------------------------------------

@criterion(8, "bootstrap calibration: >=93% coverage over 200 Bernoulli meta-trials")
def test_criterion_08_bootstrap_calibration():
    t0 = time.monotonic()
    p, n, trials = 0.6, 300, 200
    draw_rng = np.random.default_rng(20240917)
    covered = 0
    for trial in range(trials):
        sample = draw_rng.binomial(1, p, size=n).astype(float)
        lo, hi = bootstrap_ci(sample, iterations=10_000, level=0.95, seed=1000 + trial)
        if lo <= p <= hi:
            covered += 1
    rate = covered / trials
    assert rate >= 0.93, f"coverage {rate:.3f} below 0.93"

    lo, hi = bootstrap_ci([0.25] * 100, iterations=10_000, seed=5)
    assert lo == hi == 0.25
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0, f"calibration took {elapsed:.2f}s"


# -- 9 ----------------------------------------------------------------------

def _reward_corpus() -> list[tuple[str, list[str]]]:
    rng = random.Random(42)
    pool = ["alpha", "beta", "gamma", "delta"]
    corpus = []
    for _ in range(100):
        truth = rng.sample(pool, rng.randint(0, 3))
        called = rng.sample(pool, rng.randint(0, 3))
        shape = rng.choice(["tagged", "bare", "broken_tag", "broken_plus_bare", "none"])
        if shape == "tagged":
            output = "".join(tag_block(n) for n in called)
        elif shape == "bare":
            output = " ".join(json.dumps({"name": n, "arguments": {}}) for n in called)
        elif shape == "broken_tag":
            output = "<tool_call>{oops</tool_call>"
        elif shape == "broken_plus_bare":
            output = "<tool_call>{oops</tool_call> " + " ".join(
                json.dumps({"name": n, "arguments": {}}) for n in called
            )
        else:
            output = "no calls in this reply"
        corpus.append((output, truth))
    return corpus


@criterion(9, "reward additivity on 100 outputs; ablations ignore the other axis")
def test_criterion_09_reward_ablations():
    corpus = _reward_corpus()
    assert len(corpus) == 100
    selection_only = RewardConfig.selection_only()
    format_only = RewardConfig.format_only()
    for output, truth in corpus:
        full = total_reward(output, truth).total
        sel = total_reward(output, truth, selection_only).total
        fmt = total_reward(output, truth, format_only).total
        assert full == sel + fmt, (output, truth, full, sel, fmt)

    # selection-only cannot see tag well-formedness: both outputs call alpha
    well_formed = tag_block("alpha")
    fumbled = '<tool_call>{oops</tool_call> {"name": "alpha", "arguments": {}}'
    for truth in ([], ["alpha"], ["alpha", "beta"], ["gamma"]):
        assert (
            total_reward(well_formed, truth, selection_only).total
            == total_reward(fumbled, truth, selection_only).total
        )

    # format-only cannot see tool identity
    for truth in ([], ["alpha"], ["gamma"]):
        assert (
            total_reward(tag_block("alpha"), truth, format_only).total
            == total_reward(tag_block("gamma"), truth, format_only).total
        )


# -- 10 ---------------------------------------------------------------------

@criterion(10, "agent loop: approve executes once, reject yields the verbatim cancellation")
def test_criterion_10_agent_loop(tmp_path):
    counter = str(tmp_path / "tick.count")
    command, args = mock_command(
        {"name": "vault", "tools": [{"name": "tick", "handler": "counter", "counterFile": counter}]}
    )
    config = {"mcpServers": {"vault": {"command": command, "args": args, "riskLevel": 2}}}
    call_block = tag_block("tick")

    with live_bridge(config) as (_, url):
        approved = run_turn(
            "count this",
            mcp_url=url,
            llm=ScriptedLlm([call_block, "Counted once."]),
            operator=lambda pending: True,
        )
        assert approved.final_text == "Counted once."
        assert approved.results[0]["result"] == {"count": 1}
        assert counter_value(counter) == 1

        rejected = run_turn(
            "count again",
            mcp_url=url,
            llm=ScriptedLlm([call_block, "Understood, skipping."]),
            operator=lambda pending: False,
        )
        assert rejected.results[0] == {"status": "cancelled", "message": "User cancelled operation"}
        assert counter_value(counter) == 1, "a rejected call must not execute"


# -- 11 ---------------------------------------------------------------------

@criterion(11, "supervision: degraded within a heartbeat, auto-reconnect keeps the id, no hangs")
def test_criterion_11_supervision(tmp_path):
    command, args = mock_command(
        {"name": "frail", "tools": [{"name": "echo", "handler": "echo"}, {"name": "nap", "handler": "sleep"}]}
    )
    heartbeat_ms = 500
    request_timeout_ms = 2500
    config = {
        "mcpServers": {"frail": {"command": command, "args": args, "riskLevel": 1}},
        "settings": {
            "heartbeatIntervalMs": heartbeat_ms,
            "requestTimeoutMs": request_timeout_ms,
            "backoff": {"firstDelayMs": 50, "factor": 2.0, "capMs": 200, "maxAttempts": 5},
        },
    }

    with live_bridge(config) as (bridge, _):
        bridge.start_monitor()
        conn = bridge.manager.list_connections()[0]
        server_id = conn.id
        old_pid = conn.instances()[0].proc.pid

        outcomes: list[tuple[float, str]] = []
        lock = threading.Lock()

        def inflight() -> None:
            t_start = time.monotonic()
            try:
                bridge.manager.route_request(server_id, "nap", {"ms": 2000})
                verdict = "completed"
            except (TransportClosedError, ServerUnavailableError, ServerStoppedError, TransportError):
                verdict = "failed_cleanly"
            except RpcTimeoutError:
                verdict = "timed_out"
            with lock:
                outcomes.append((time.monotonic() - t_start, verdict))

        threads = [threading.Thread(target=inflight) for _ in range(3)]
        for t in threads:
            t.start()
        time.sleep(0.3)  # let the naps reach the server

        t_kill = time.monotonic()
        conn.instances()[0].proc.kill()
        while conn.state != "degraded" and time.monotonic() - t_kill < 5:
            time.sleep(0.005)
        degraded_after = time.monotonic() - t_kill
        assert conn.state in ("degraded", "healthy"), f"state {conn.state} after kill"
        assert degraded_after <= heartbeat_ms / 1000.0 + 0.3, (
            f"degraded took {degraded_after:.2f}s, over one heartbeat interval"
        )

        for t in threads:
            t.join(timeout=request_timeout_ms / 1000.0 + 2)
        assert not any(t.is_alive() for t in threads), "an in-flight request hung"
        assert len(outcomes) == 3
        for elapsed, verdict in outcomes:
            assert verdict == "failed_cleanly", f"in-flight request {verdict}"
            assert elapsed < request_timeout_ms / 1000.0 + 1.0

        deadline = time.monotonic() + 12
        recovered = False
        while time.monotonic() < deadline:
            try:
                if (
                    conn.state == "healthy"
                    and conn.instances()[0].proc.pid != old_pid
                    and bridge.manager.route_request(server_id, "echo", {"back": 1}) == {"back": 1}
                ):
                    recovered = True
                    break
            except Exception:
                pass
            time.sleep(0.1)
        assert recovered, "server never came back healthy"
        assert bridge.manager.get(server_id) is conn, "reconnect must keep the server id"
