"""Measurement harness: latency modes, concurrency sweeps, risk traces,
cold start, and resource sampling.

The three latency modes answer one question each: what a call costs
through the full HTTP bridge (bridge_rest), over a bare persistent
stdio pipe (stdio_keepalive), and when every request pays for a fresh
process plus handshake (stdio_perspawn). Percentiles use the
nearest-rank method, so every reported value is an actual sample.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import psutil
import requests

from .errors import BridgeError
from .gateway import Bridge, start_http
from .manager import ServerConfig
from .risk import DIRECT, classify_risk
from .transport import RpcClient, StdioTransport, call_tool, perform_handshake

logger = logging.getLogger(__name__)

MODE_BRIDGE_REST = "bridge_rest"
MODE_STDIO_KEEPALIVE = "stdio_keepalive"
MODE_STDIO_PERSPAWN = "stdio_perspawn"
ALL_MODES = (MODE_BRIDGE_REST, MODE_STDIO_KEEPALIVE, MODE_STDIO_PERSPAWN)

DEFAULT_LEVELS = (1, 5, 10, 20, 50)


class BenchError(BridgeError):
    """A suite could not reach its target; names the mode and operation."""


class ColdStartError(BridgeError):
    """A server never became healthy; carries the partial breakdown."""

    def __init__(self, message: str, failed: list[str], partial: dict):
        super().__init__(message)
        self.failed = failed
        self.partial = partial


def nearest_rank(samples: list[float], pct: float) -> float:
    """Nearest-rank percentile: ceil(p/100 * n), 1-indexed, clamped."""
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = math.ceil(pct / 100.0 * len(ordered))
    rank = min(max(rank, 1), len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class LatencyOp:
    label: str
    server_id: str
    tool: str
    arguments: dict = field(default_factory=dict)
    config: ServerConfig | None = None


@dataclass
class LatencyRecord:
    operation: str
    mode: str
    samples_ms: list[float]
    run_means_ms: list[float]
    mean_ms: float
    std_ms: float | None
    p50_ms: float
    p95_ms: float
    p99_ms: float
    min_ms: float
    max_ms: float

    @classmethod
    def from_runs(cls, operation: str, mode: str, per_run: list[list[float]]) -> "LatencyRecord":
        pooled = [s for run in per_run for s in run]
        run_means = [sum(run) / len(run) for run in per_run]
        mean = sum(pooled) / len(pooled)
        if len(run_means) > 1:
            mu = sum(run_means) / len(run_means)
            std = math.sqrt(sum((m - mu) ** 2 for m in run_means) / (len(run_means) - 1))
        else:
            std = None  # a single run has no between-run spread
        return cls(
            operation=operation,
            mode=mode,
            samples_ms=pooled,
            run_means_ms=run_means,
            mean_ms=mean,
            std_ms=std,
            p50_ms=nearest_rank(pooled, 50),
            p95_ms=nearest_rank(pooled, 95),
            p99_ms=nearest_rank(pooled, 99),
            min_ms=min(pooled),
            max_ms=max(pooled),
        )

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "mode": self.mode,
            "meanMs": self.mean_ms,
            "stdMs": self.std_ms,
            "p50Ms": self.p50_ms,
            "p95Ms": self.p95_ms,
            "p99Ms": self.p99_ms,
            "minMs": self.min_ms,
            "maxMs": self.max_ms,
            "samples": len(self.samples_ms),
            "samplesMs": self.samples_ms,
            "runMeansMs": self.run_means_ms,
        }


def _spawn_direct(config: ServerConfig) -> tuple[subprocess.Popen, RpcClient]:
    env = os.environ.copy()
    env.update(config.env)
    proc = subprocess.Popen(
        [config.command, *config.args],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        env=env,
    )
    client = RpcClient(StdioTransport(proc))
    try:
        perform_handshake(client, timeout_s=config.connect_timeout_ms / 1000.0)
    except Exception:
        _teardown_direct(proc, client)
        raise
    return proc, client


def _teardown_direct(proc: subprocess.Popen, client: RpcClient) -> None:
    client.close()
    try:
        proc.kill()
    except OSError:
        pass
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        pass


def run_latency_suite(
    ops: list[LatencyOp],
    iterations: int = 50,
    runs: int = 3,
    bridge_url: str | None = None,
    modes: tuple[str, ...] = ALL_MODES,
    perspawn_divisor: int = 5,
) -> list[LatencyRecord]:
    """Measure every op under every mode.

    Per-spawn iterations are scaled down by perspawn_divisor because a
    full process launch per request is orders of magnitude slower.
    """
    records: list[LatencyRecord] = []
    for op in ops:
        for mode in modes:
            if mode == MODE_BRIDGE_REST:
                if not bridge_url:
                    raise BenchError(f"{mode}: no bridge URL for operation {op.label}")
                per_run = _measure_rest(bridge_url, op, iterations, runs)
            elif mode == MODE_STDIO_KEEPALIVE:
                per_run = _measure_keepalive(op, iterations, runs)
            elif mode == MODE_STDIO_PERSPAWN:
                per_run = _measure_perspawn(op, max(1, iterations // perspawn_divisor), runs)
            else:
                raise BenchError(f"unknown latency mode: {mode}")
            records.append(LatencyRecord.from_runs(op.label, mode, per_run))
    return records


def _measure_rest(bridge_url: str, op: LatencyOp, iterations: int, runs: int) -> list[list[float]]:
    url = f"{bridge_url.rstrip('/')}/servers/{op.server_id}/tools/{op.tool}"
    per_run = []
    for _ in range(runs):
        session = requests.Session()
        samples = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            resp = session.post(url, json=op.arguments, timeout=30)
            elapsed = (time.perf_counter() - t0) * 1000.0
            if resp.status_code != 200:
                raise BenchError(f"{MODE_BRIDGE_REST}: {op.label} answered HTTP {resp.status_code}")
            samples.append(elapsed)
        session.close()
        per_run.append(samples)
    return per_run


def _require_stdio_config(op: LatencyOp, mode: str) -> ServerConfig:
    if op.config is None or op.config.transport != "stdio":
        raise BenchError(f"{mode}: operation {op.label} has no stdio command to spawn")
    return op.config


def _measure_keepalive(op: LatencyOp, iterations: int, runs: int) -> list[list[float]]:
    config = _require_stdio_config(op, MODE_STDIO_KEEPALIVE)
    per_run = []
    for _ in range(runs):
        try:
            proc, client = _spawn_direct(config)
        except Exception as exc:
            raise BenchError(f"{MODE_STDIO_KEEPALIVE}: cannot reach {op.label}: {exc}") from exc
        try:
            samples = []
            for _ in range(iterations):
                t0 = time.perf_counter()
                call_tool(client, op.tool, op.arguments, timeout=30)
                samples.append((time.perf_counter() - t0) * 1000.0)
        finally:
            _teardown_direct(proc, client)
        per_run.append(samples)
    return per_run


def _measure_perspawn(op: LatencyOp, iterations: int, runs: int) -> list[list[float]]:
    config = _require_stdio_config(op, MODE_STDIO_PERSPAWN)
    per_run = []
    for _ in range(runs):
        samples = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            try:
                proc, client = _spawn_direct(config)
            except Exception as exc:
                raise BenchError(f"{MODE_STDIO_PERSPAWN}: cannot reach {op.label}: {exc}") from exc
            try:
                call_tool(client, op.tool, op.arguments, timeout=30)
            finally:
                _teardown_direct(proc, client)
            samples.append((time.perf_counter() - t0) * 1000.0)
        per_run.append(samples)
    return per_run


def default_latency_ops(bridge: Bridge, arguments: dict | None = None) -> list[LatencyOp]:
    """First level-1 tool of every running stdio server."""
    ops = []
    for conn in bridge.manager.list_connections():
        if conn.config.transport != "stdio":
            continue
        for tool in conn.capabilities.tools:
            if classify_risk(conn.config, tool.name) == DIRECT:
                ops.append(
                    LatencyOp(
                        label=f"{conn.config.name}/{tool.name}",
                        server_id=conn.id,
                        tool=tool.name,
                        arguments=dict(arguments or {"value": "ping"}),
                        config=conn.config,
                    )
                )
                break
    return ops


# -- concurrency ------------------------------------------------------------


@dataclass
class ThroughputRecord:
    concurrency: int
    requests_per_sec: float
    mean_latency_ms: float
    total_requests: int
    errors: int

    def to_dict(self) -> dict:
        return {
            "concurrency": self.concurrency,
            "requestsPerSec": self.requests_per_sec,
            "meanLatencyMs": self.mean_latency_ms,
            "totalRequests": self.total_requests,
            "errors": self.errors,
        }


def run_concurrency_suite(
    bridge_url: str,
    targets: list[tuple[str, str, dict]],
    levels: tuple[int, ...] = DEFAULT_LEVELS,
    requests_per_level: int = 100,
) -> list[ThroughputRecord]:
    """Drive a mixed workload at each level with a fixed worker pool,
    which caps in-flight requests at exactly that level."""
    if not targets:
        raise BenchError("concurrency suite needs at least one target")
    base = bridge_url.rstrip("/")
    records = []
    for level in levels:
        tasks: "queue.Queue[tuple[str, str, dict]]" = queue.Queue()
        for i in range(requests_per_level):
            tasks.put(targets[i % len(targets)])
        latencies: list[float] = []
        errors = 0
        lock = threading.Lock()

        def worker() -> None:
            nonlocal errors
            session = requests.Session()
            while True:
                try:
                    server_id, tool, arguments = tasks.get_nowait()
                except queue.Empty:
                    session.close()
                    return
                t0 = time.perf_counter()
                try:
                    resp = session.post(
                        f"{base}/servers/{server_id}/tools/{tool}", json=arguments, timeout=60
                    )
                    ok = resp.status_code == 200
                except requests.RequestException:
                    ok = False
                elapsed = (time.perf_counter() - t0) * 1000.0
                with lock:
                    if ok:
                        latencies.append(elapsed)
                    else:
                        errors += 1

        t_start = time.perf_counter()
        threads = [threading.Thread(target=worker, daemon=True) for _ in range(level)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        wall_s = time.perf_counter() - t_start
        records.append(
            ThroughputRecord(
                concurrency=level,
                requests_per_sec=requests_per_level / wall_s if wall_s > 0 else 0.0,
                mean_latency_ms=sum(latencies) / len(latencies) if latencies else 0.0,
                total_requests=requests_per_level,
                errors=errors,
            )
        )
    return records


# -- risk traces ------------------------------------------------------------


def trace_risk_levels(
    bridge_url: str,
    level1_target: tuple[str, str, dict],
    level2_target: tuple[str, str, dict],
    counter_read: Callable[[], int] | None = None,
) -> dict:
    """Time the single-leg level-1 path and both legs of the level-2
    confirmation workflow, then probe replay and rejection behavior."""
    base = bridge_url.rstrip("/")
    session = requests.Session()
    report: dict[str, Any] = {}

    sid, tool, arguments = level1_target
    t0 = time.perf_counter()
    resp = session.post(f"{base}/servers/{sid}/tools/{tool}", json=arguments, timeout=30)
    report["level1"] = {
        "latencyMs": (time.perf_counter() - t0) * 1000.0,
        "httpStatus": resp.status_code,
    }

    sid, tool, arguments = level2_target
    t0 = time.perf_counter()
    first = session.post(f"{base}/servers/{sid}/tools/{tool}", json=arguments, timeout=30)
    request_leg_ms = (time.perf_counter() - t0) * 1000.0
    if first.status_code != 202:
        raise BenchError(f"risk trace: level-2 request answered HTTP {first.status_code}")
    pending = first.json()
    confirm_body = {"token": pending["token"], "decision": "approve"}
    t0 = time.perf_counter()
    second = session.post(f"{base}/confirmations/{pending['confirmationId']}", json=confirm_body, timeout=30)
    confirm_leg_ms = (time.perf_counter() - t0) * 1000.0
    report["level2"] = {
        "requestLegMs": request_leg_ms,
        "confirmLegMs": confirm_leg_ms,
        "totalMs": request_leg_ms + confirm_leg_ms,
        "httpStatus": second.status_code,
    }

    # replaying a consumed confirmation must land on not-found
    replay = session.post(f"{base}/confirmations/{pending['confirmationId']}", json=confirm_body, timeout=30)
    report["resubmission"] = {"httpStatus": replay.status_code, "rejected": replay.status_code == 404}

    before = counter_read() if counter_read is not None else None
    third = session.post(f"{base}/servers/{sid}/tools/{tool}", json=arguments, timeout=30)
    if third.status_code != 202:
        raise BenchError(f"risk trace: second level-2 request answered HTTP {third.status_code}")
    pending2 = third.json()
    rejected = session.post(
        f"{base}/confirmations/{pending2['confirmationId']}",
        json={"token": pending2["token"], "decision": "reject"},
        timeout=30,
    )
    entry: dict[str, Any] = {
        "httpStatus": rejected.status_code,
        "status": rejected.json().get("status") if rejected.status_code == 200 else None,
    }
    if before is not None:
        entry["executionsDuringReject"] = counter_read() - before
    report["rejection"] = entry
    session.close()
    return report


# -- cold start -------------------------------------------------------------


def measure_cold_start(configs: list[ServerConfig], settings: dict | None = None, port: int = 0) -> dict:
    """Wall time from nothing to gateway up and every server healthy."""
    t0 = time.perf_counter()
    bridge = Bridge(configs, settings=settings or {"sandboxBackend": "subprocess"})
    server, _thread = start_http(bridge, port=port)
    gateway_up_ms = (time.perf_counter() - t0) * 1000.0

    durations: dict[str, float] = {}
    failures: dict[str, str] = {}
    lock = threading.Lock()

    def boot(config: ServerConfig) -> None:
        s0 = time.perf_counter()
        try:
            bridge.manager.start_server(config)
        except Exception as exc:
            with lock:
                failures[config.name] = str(exc)
        else:
            with lock:
                durations[config.name] = (time.perf_counter() - s0) * 1000.0

    threads = [threading.Thread(target=boot, args=(c,), daemon=True) for c in configs]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    total_ms = (time.perf_counter() - t0) * 1000.0

    server.shutdown()
    bridge.shutdown()
    if failures:
        names = sorted(failures)
        raise ColdStartError(
            f"server(s) never became healthy: {', '.join(names)}",
            failed=names,
            partial={"gatewayUpMs": gateway_up_ms, "servers": durations, "errors": failures},
        )
    return {"gatewayUpMs": gateway_up_ms, "servers": durations, "totalMs": total_ms}


# -- resources --------------------------------------------------------------


def detect_leak(rss_series: list[int], min_growth_frac: float = 0.05) -> bool:
    """Flag a mostly-monotone RSS climb bigger than the threshold."""
    if len(rss_series) < 3 or rss_series[0] <= 0:
        return False
    growth = (rss_series[-1] - rss_series[0]) / rss_series[0]
    steps = [b - a for a, b in zip(rss_series, rss_series[1:])]
    nondecreasing = sum(1 for d in steps if d >= 0) / len(steps)
    return growth >= min_growth_frac and nondecreasing >= 0.8


def sample_resources(
    pid: int | None = None,
    interval_ms: int = 200,
    duration_ms: int = 5000,
    until: Callable[[], bool] | None = None,
) -> dict:
    """Sample one process's RSS and system free memory on an interval.

    Stops after duration_ms, or earlier once `until` returns True.
    """
    proc = psutil.Process(pid) if pid is not None else psutil.Process()
    samples = []
    t0 = time.monotonic()
    deadline = t0 + duration_ms / 1000.0
    while True:
        now = time.monotonic()
        if now >= deadline or (until is not None and until()):
            break
        samples.append(
            {
                "tMs": (now - t0) * 1000.0,
                "rssBytes": proc.memory_info().rss,
                "availableBytes": psutil.virtual_memory().available,
            }
        )
        time.sleep(interval_ms / 1000.0)
    if not samples:
        raise BenchError("resource sampling window produced no samples")
    rss = [s["rssBytes"] for s in samples]
    leak = detect_leak(rss)
    if leak:
        logger.warning("RSS grew monotonically from %d to %d bytes", rss[0], rss[-1])
    return {
        "samples": samples,
        "rssStartBytes": rss[0],
        "rssEndBytes": rss[-1],
        "leakSuspected": leak,
    }


# -- reports ----------------------------------------------------------------


def write_json(out_dir: str, name: str, payload) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_latency_reports(out_dir: str, records: list[LatencyRecord]) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [write_json(out_dir, "latency.json", [r.to_dict() for r in records])]

    detail = os.path.join(out_dir, "latency.csv")
    with open(detail, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["operation", "mode", "mean_ms", "std_ms", "p50_ms", "p95_ms", "p99_ms", "min_ms", "max_ms", "samples"])
        for r in records:
            writer.writerow(
                [r.operation, r.mode, f"{r.mean_ms:.3f}", "" if r.std_ms is None else f"{r.std_ms:.3f}",
                 f"{r.p50_ms:.3f}", f"{r.p95_ms:.3f}", f"{r.p99_ms:.3f}", f"{r.min_ms:.3f}", f"{r.max_ms:.3f}",
                 len(r.samples_ms)]
            )
    paths.append(detail)

    by_op: dict[str, dict[str, LatencyRecord]] = {}
    for r in records:
        by_op.setdefault(r.operation, {})[r.mode] = r
    comparison = os.path.join(out_dir, "latency_comparison.csv")
    with open(comparison, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["operation", "bridge_rest_ms", "stdio_keepalive_ms", "stdio_perspawn_ms", "overhead_ms"])
        for op, modes in by_op.items():
            rest = modes.get(MODE_BRIDGE_REST)
            keep = modes.get(MODE_STDIO_KEEPALIVE)
            spawn = modes.get(MODE_STDIO_PERSPAWN)
            overhead = rest.mean_ms - keep.mean_ms if rest and keep else None
            writer.writerow(
                [op,
                 f"{rest.mean_ms:.3f}" if rest else "",
                 f"{keep.mean_ms:.3f}" if keep else "",
                 f"{spawn.mean_ms:.3f}" if spawn else "",
                 f"{overhead:.3f}" if overhead is not None else ""]
            )
    paths.append(comparison)
    return paths


def write_concurrency_reports(out_dir: str, records: list[ThroughputRecord]) -> list[str]:
    paths = [write_json(out_dir, "concurrency.json", [r.to_dict() for r in records])]
    path = os.path.join(out_dir, "concurrency.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["concurrency", "throughput_rps", "mean_latency_ms", "total_requests", "errors"])
        for r in records:
            writer.writerow([r.concurrency, f"{r.requests_per_sec:.2f}", f"{r.mean_latency_ms:.3f}", r.total_requests, r.errors])
    paths.append(path)
    return paths
