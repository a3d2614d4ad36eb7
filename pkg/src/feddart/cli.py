"""Command line: ``feddart {server,worker,run,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
from typing import Sequence, TextIO

from feddart.config import ConfigError, ServerConfig
from feddart.experiment import EXIT_BAD_CONFIG, EXIT_CONNECT_FAILED, EXIT_OK, ExperimentConfig, run_experiment
from feddart.logserver import LogServer
from feddart.server.http import build_server
from feddart.worker.runtime import WorkerConfig, run_loop

log = logging.getLogger("feddart.cli")

REPORT_COLUMNS = ("clustering_round", "round", "cluster", "loss", "n_devices", "devices", "missing", "max_duration")


class ReportError(ValueError):
    pass


def _on_signals(handler) -> None:
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, handler)


def cmd_server(args: argparse.Namespace) -> int:
    try:
        config = ServerConfig.load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    logs = LogServer(args.log_level, config.log_file)
    try:
        server = build_server(config, host=args.host, port=args.port)
    except OSError as exc:
        print(f"error: cannot bind: {exc}", file=sys.stderr)
        return EXIT_CONNECT_FAILED
    # shutdown() blocks until serve_forever returns, so call it off the main thread.
    _on_signals(lambda *_: threading.Thread(target=server.shutdown, daemon=True).start())
    log.info("serving url=%s capacity=%d", server.url, config.capacity)
    print(f"listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        server.app.shutdown()
        logs.close()
    return EXIT_OK


def cmd_worker(args: argparse.Namespace) -> int:
    try:
        config = WorkerConfig.load(args.config, device_name=args.device_name, server_url=args.server)
        config.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    logs = LogServer(args.log_level)
    stop = threading.Event()
    _on_signals(lambda *_: stop.set())
    try:
        run_loop(config, stop=stop)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    finally:
        logs.close()
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = ExperimentConfig.load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    if args.test_mode:
        config.test_mode = True
    if args.seed is not None:
        config.seed = args.seed
    if args.output_dir is not None:
        config.output_dir = args.output_dir
    logs = LogServer(args.log_level)
    try:
        outcome = run_experiment(config)
    finally:
        logs.close()
    if outcome.exit_code != EXIT_OK:
        print(f"error: {outcome.error}", file=sys.stderr)
    else:
        print(f"{len(outcome.history)} rounds written to {config.output_dir}")
    return outcome.exit_code


def read_metrics(stream: TextIO) -> list[dict]:
    records = []
    for number, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportError(f"line {number}: not valid JSON ({exc.msg})") from None
        if not isinstance(record, dict) or not {"round", "cluster", "loss"} <= record.keys():
            raise ReportError(f"line {number}: expected an object with round, cluster and loss")
        records.append(record)
    return records


def write_report(records: Sequence[dict], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in records:
        durations = r.get("durations") or {}
        writer.writerow([
            r.get("clustering_round", 1),
            r["round"],
            r["cluster"],
            repr(float(r["loss"])),
            len(r.get("devices", [])),
            ";".join(r.get("devices", [])),
            ";".join(r.get("missing", [])),
            f"{max(durations.values()):.6f}" if durations else "",
        ])


def cmd_report(args: argparse.Namespace) -> int:
    try:
        with open(args.metrics, encoding="utf-8") as fh:
            records = read_metrics(fh)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except ReportError as exc:
        print(f"error: {args.metrics}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    write_report(records, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddart", description="Server-centric federated learning runtime.")
    parser.add_argument("--log-level", default="info", choices=["debug", "info", "warn", "error"])
    commands = parser.add_subparsers(dest="command", required=True)

    server = commands.add_parser("server", help="run the task server")
    server.add_argument("--config", required=True, help="server config JSON")
    server.add_argument("--host", help="bind address (default: from the server URL)")
    server.add_argument("--port", type=int, help="bind port (default: from the server URL)")
    server.set_defaults(func=cmd_server)

    worker = commands.add_parser("worker", help="run a worker daemon on a client")
    worker.add_argument("--config", required=True, help="worker config JSON")
    worker.add_argument("--device-name", help="override device_name from the config")
    worker.add_argument("--server", help="override server_url from the config")
    worker.set_defaults(func=cmd_worker)

    run = commands.add_parser("run", help="run an FL experiment")
    run.add_argument("--config", required=True, help="experiment config JSON")
    run.add_argument("--test-mode", action="store_true", help="simulate server and clients in-process")
    run.add_argument("--seed", type=int)
    run.add_argument("--output-dir")
    run.set_defaults(func=cmd_run)

    report = commands.add_parser("report", help="CSV summary of a metrics.jsonl file")
    report.add_argument("metrics")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
