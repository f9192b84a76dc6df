"""Command line front end.

Subcommands: serve, eval, reward, agent, bench, mock.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgekit", description="MCP-to-REST bridge toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP gateway")
    serve.add_argument("--config", required=True, help="server config JSON (mcpServers map)")
    serve.add_argument("--port", type=int, default=3000)
    serve.add_argument("--host", default="127.0.0.1")

    ev = sub.add_parser("eval", help="score model outputs against ground truth")
    ev.add_argument("--input", required=True, help="JSONL of samples")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--bootstrap", type=int, default=10000, help="bootstrap iterations")
    ev.add_argument("--level", type=float, default=0.95, help="confidence level")
    ev.add_argument("--out", help="write the full JSON report here")

    rw = sub.add_parser("reward", help="compute rewards for model outputs")
    rw.add_argument("--input", required=True, help="JSONL of samples")
    rw.add_argument("--mode", choices=["full", "selection", "format"], default="full")
    rw.add_argument("--out", help="write per-sample rewards JSONL here")

    ag = sub.add_parser("agent", help="run one agent turn against a live gateway")
    ag.add_argument("--query", required=True)
    ag.add_argument("--mcp-url", default="http://localhost:3000")
    ag.add_argument("--mcp-port", type=int, help="override the port in --mcp-url")
    ag.add_argument("--hide-json", action="store_true", help="hide raw tool results in the transcript")
    ag.add_argument("--json-width", type=int, default=100)
    ag.add_argument("--max-tool-calls", type=int, default=16)
    ag.add_argument("--script", help="file of canned model replies (JSON array or one per line)")
    ag.add_argument("--llm-url", help="chat-completions endpoint for a live model")
    ag.add_argument("--llm-model", default="default")
    ag.add_argument("--llm-api-key-env", default="LLM_API_KEY")
    ag.add_argument("--auto-approve", action="store_true", help="approve confirmations without prompting")
    ag.add_argument("--auto-reject", action="store_true", help="reject confirmations without prompting")

    be = sub.add_parser("bench", help="measurement suites against a self-hosted gateway")
    be.add_argument("suite", choices=["latency", "concurrency", "risk", "coldstart", "resources"])
    be.add_argument("--config", required=True, help="server config JSON")
    be.add_argument("--out", default="bench_out", help="report directory")
    be.add_argument("--runs", type=int, default=3)
    be.add_argument("--iterations", type=int, default=50)
    be.add_argument("--levels", default="1,5,10,20,50", help="comma-separated concurrency levels")
    be.add_argument("--requests", type=int, default=100, help="requests per concurrency level")
    be.add_argument("--duration-ms", type=int, default=5000, help="resource sampling window")
    be.add_argument("--interval-ms", type=int, default=200, help="resource sampling interval")

    mk = sub.add_parser("mock", help="run one mock MCP server on stdio, or emit a fleet")
    mk.add_argument("--behavior", help="behavior JSON, inline or a file path")
    mk.add_argument("--emit-fleet", metavar="DIR", help="write the default mock fleet config into DIR and exit")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "serve": _cmd_serve,
        "eval": _cmd_eval,
        "reward": _cmd_reward,
        "agent": _cmd_agent,
        "bench": _cmd_bench,
        "mock": _cmd_mock,
    }[args.command]
    return handler(args)


def _cmd_serve(args) -> int:
    from .gateway import serve

    serve(args.config, port=args.port, host=args.host)
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import load_eval_samples, run_evaluation, write_report

    samples = load_eval_samples(args.input)
    report = run_evaluation(samples, seed=args.seed, iterations=args.bootstrap, level=args.level)
    for name in sorted(report["categories"]):
        cat = report["categories"][name]
        lo, hi = cat["ci95F1"]
        print(
            f"{name:<16} n={cat['n']:<4} f1={cat['meanF1']:.4f} "
            f"[{lo:.4f}, {hi:.4f}]  acc={cat['accuracy']:.4f}"
        )
    macro = report["macro"]
    print(f"{'macro':<16} n={report['n']:<4} f1={macro['meanF1']:.4f}  acc={macro['accuracy']:.4f}")
    fails = report["failures"]
    print(
        "failures: "
        + ", ".join(f"{k}={fails[k]:.1f}%" for k in ("correct", "no_tool_call", "wrong_tool", "partial"))
        + f"; format_heuristic={fails['format_heuristic']:.1f}%"
    )
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_reward(args) -> int:
    from .rewards import score_file

    out = args.out or (os.path.splitext(args.input)[0] + ".rewards.jsonl")
    count = score_file(args.input, out, mode=args.mode)
    if count:
        with open(out, "r", encoding="utf-8") as fh:
            totals = [json.loads(line)["total"] for line in fh if line.strip()]
        print(f"{count} samples, mean reward {sum(totals) / count:.4f}")
    else:
        print("0 samples")
    print(f"rewards written to {out}")
    return 0


def _override_port(url: str, port: int) -> str:
    from urllib.parse import urlsplit, urlunsplit

    parts = urlsplit(url if "//" in url else f"http://{url}")
    netloc = f"{parts.hostname or 'localhost'}:{port}"
    return urlunsplit((parts.scheme or "http", netloc, parts.path, parts.query, parts.fragment))


def _cmd_agent(args) -> int:
    from .agent import HttpLlm, ScriptedLlm, render_result, run_turn

    if args.script:
        with open(args.script, "r", encoding="utf-8") as fh:
            text = fh.read()
        if text.lstrip().startswith("["):
            replies = json.loads(text)
        else:
            replies = [line for line in text.splitlines() if line.strip()]
        backend = ScriptedLlm(replies)
    elif args.llm_url:
        backend = HttpLlm(args.llm_url, model=args.llm_model, api_key_env=args.llm_api_key_env)
    else:
        print("agent needs --script or --llm-url", file=sys.stderr)
        return 2

    if args.auto_approve:
        operator = lambda pending: True
    elif args.auto_reject:
        operator = lambda pending: False
    else:

        def operator(pending: dict) -> bool:
            answer = input(
                f"confirm {pending.get('confirmationId', '?')} (risk level "
                f"{pending.get('riskLevel', '?')}) [y/N]: "
            )
            return answer.strip().lower() in ("y", "yes")

    mcp_url = args.mcp_url
    if args.mcp_port:
        mcp_url = _override_port(mcp_url, args.mcp_port)

    turn = run_turn(
        args.query,
        mcp_url=mcp_url,
        llm=backend,
        operator=operator,
        max_tool_calls=args.max_tool_calls,
    )
    for call, result in zip(turn.calls, turn.results):
        print(f"-> {call.name} {json.dumps(call.arguments, sort_keys=True)}")
        print(render_result(result, hide_json=args.hide_json, width=args.json_width))
    print(turn.final_text)
    return 0


def _cmd_bench(args) -> int:
    from . import bench
    from .manager import load_config_file

    configs, settings = load_config_file(args.config)
    settings.setdefault("sandboxBackend", "subprocess")

    if args.suite == "coldstart":
        report = bench.measure_cold_start(configs, settings=settings)
        path = bench.write_json(args.out, "coldstart.json", report)
        print(f"gateway up in {report['gatewayUpMs']:.1f} ms, all servers in {report['totalMs']:.1f} ms")
        print(f"report written to {path}")
        return 0

    from .gateway import Bridge, start_http

    bridge = Bridge(configs, settings=settings)
    server, _ = start_http(bridge, port=0)
    url = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        bridge.start_all(strict=True)
        if args.suite == "latency":
            ops = bench.default_latency_ops(bridge)
            if not ops:
                print("no level-1 stdio tools to measure", file=sys.stderr)
                return 1
            records = bench.run_latency_suite(
                ops, iterations=args.iterations, runs=args.runs, bridge_url=url
            )
            for path in bench.write_latency_reports(args.out, records):
                print(f"report written to {path}")
        elif args.suite == "concurrency":
            ops = bench.default_latency_ops(bridge)
            if not ops:
                print("no level-1 stdio tools to measure", file=sys.stderr)
                return 1
            levels = tuple(int(x) for x in args.levels.split(","))
            records = bench.run_concurrency_suite(
                url,
                [(op.server_id, op.tool, op.arguments) for op in ops],
                levels=levels,
                requests_per_level=args.requests,
            )
            for r in records:
                print(
                    f"c={r.concurrency:<3} {r.requests_per_sec:8.1f} req/s  "
                    f"mean {r.mean_latency_ms:.2f} ms  errors {r.errors}"
                )
            for path in bench.write_concurrency_reports(args.out, records):
                print(f"report written to {path}")
        elif args.suite == "risk":
            level1 = level2 = None
            from .risk import CONFIRM, DIRECT, classify_risk

            for conn in bridge.manager.list_connections():
                for tool in conn.capabilities.tools:
                    level = classify_risk(conn.config, tool.name)
                    if level == DIRECT and level1 is None:
                        level1 = (conn.id, tool.name, {"value": "ping"})
                    elif level == CONFIRM and level2 is None:
                        level2 = (conn.id, tool.name, {"value": "ping"})
            if level1 is None or level2 is None:
                print("risk trace needs one level-1 and one level-2 tool in the config", file=sys.stderr)
                return 1
            report = bench.trace_risk_levels(url, level1, level2)
            path = bench.write_json(args.out, "risk_trace.json", report)
            print(json.dumps(report, indent=2, sort_keys=True))
            print(f"report written to {path}")
        elif args.suite == "resources":
            ops = bench.default_latency_ops(bridge)
            if not ops:
                print("no level-1 stdio tools to measure", file=sys.stderr)
                return 1
            import threading

            done = threading.Event()

            def load() -> None:
                try:
                    bench.run_concurrency_suite(
                        url,
                        [(op.server_id, op.tool, op.arguments) for op in ops],
                        levels=(10,),
                        requests_per_level=args.requests,
                    )
                finally:
                    done.set()

            t = threading.Thread(target=load, daemon=True)
            t.start()
            report = bench.sample_resources(
                interval_ms=args.interval_ms,
                duration_ms=args.duration_ms,
                until=done.is_set,
            )
            t.join()
            path = bench.write_json(args.out, "resources.json", report)
            delta = report["rssEndBytes"] - report["rssStartBytes"]
            print(
                f"RSS {report['rssStartBytes']} -> {report['rssEndBytes']} bytes "
                f"({delta:+d}); leak suspected: {report['leakSuspected']}"
            )
            print(f"report written to {path}")
    finally:
        server.shutdown()
        bridge.shutdown()
    return 0


def _cmd_mock(args) -> int:
    from . import mockserver

    if args.emit_fleet:
        state_dir = os.path.join(args.emit_fleet, "state")
        os.makedirs(state_dir, exist_ok=True)
        config = mockserver.default_fleet_config(state_dir)
        path = os.path.join(args.emit_fleet, "fleet.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(path)
        return 0
    if not args.behavior:
        print("mock needs --behavior or --emit-fleet", file=sys.stderr)
        return 2
    return mockserver.main(["--behavior", args.behavior])


if __name__ == "__main__":
    sys.exit(main())
