"""``duorch`` command line.

Exit codes: 0 success, 1 domain error, 2 usage or configuration error.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Sequence

from .archive import ArchiveError, pack_dir, validate_archive
from .model.diagnostics import ModelError
from .model.topology import parse_topology

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse already exits 2; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(doc: Any) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _param(text: str) -> tuple[str, Any]:
    name, sep, raw = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"parameter must be name=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return name, value


# -- archive ---------------------------------------------------------------


def cmd_pack(args) -> int:
    try:
        data = pack_dir(args.dir)
    except ArchiveError as exc:
        for d in exc.diagnostics:
            _err(f"{d.code}: {d.message}")
        return EXIT_DOMAIN
    out = Path(args.output or f"{Path(args.dir).resolve().name}.qaa")
    out.write_bytes(data)
    print(out)
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        _err(f"cannot read {args.file}: {exc}")
        return EXIT_USAGE
    diags = validate_archive(data)
    if args.json:
        _emit({"ok": not diags, "diagnostics": [d.__dict__ for d in diags]})
    for d in diags:
        _err(f"{d.code}: {d.message}")
    if not diags and not args.json:
        print("ok")
    return EXIT_DOMAIN if diags else EXIT_OK


# -- provisioning ----------------------------------------------------------


def cmd_plan(args) -> int:
    from .provisioner import plan

    try:
        topology = parse_topology(Path(args.topology).read_bytes())
    except OSError as exc:
        _err(f"cannot read {args.topology}: {exc}")
        return EXIT_USAGE
    except ModelError as exc:
        for d in exc.diagnostics:
            _err(f"{d.code}: {d.message}")
        return EXIT_DOMAIN
    deployment = plan(topology)
    if args.json:
        _emit(deployment.to_dict())
        return EXIT_OK
    for i, stage in enumerate(deployment.stages, 1):
        print(f"stage {i}\t{','.join(stage)}")
    for src, dst in deployment.connections:
        print(f"connect\t{src}->{dst}")
    return EXIT_OK


# -- runtime ---------------------------------------------------------------


def cmd_serve(args) -> int:
    from .gateway.config import ConfigError, build_runtime, load_config
    from .gateway.runtime import GatewayError
    from .gateway.server import GatewayServer, parse_address

    try:
        cfg = load_config(args.config)
        if args.lifecycle:
            cfg.policy = {**cfg.policy, "lifecycle": args.lifecycle}
        if args.reservation:
            cfg.policy = {**cfg.policy, "qpu_reservation": args.reservation}
        if args.listen:
            cfg.listen = args.listen
        cfg.check()
        address = parse_address(args.listen or cfg.listen_address())
    except (ConfigError, ValueError) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_USAGE
    runtime = build_runtime(cfg)
    resumed = runtime.recover()
    if resumed:
        logger.info("resumed %d instance(s)", len(resumed))
    for app in cfg.apps:
        try:
            runtime.deploy(Path(app).read_bytes())
        except (OSError, GatewayError) as exc:
            _err(f"cannot deploy {app}: {exc}")
            return EXIT_DOMAIN
    try:
        server = GatewayServer(runtime, address, max_deployments=cfg.max_deployments)
    except OSError as exc:
        _err(f"cannot listen on {address[0]}:{address[1]}: {exc}")
        return EXIT_DOMAIN
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.start()
    print(f"listening {server.address}", flush=True)
    stop.wait()
    server.stop()
    return EXIT_OK


def _client(args):
    from .gateway.server import Client

    return Client(args.address, timeout=args.timeout)


def cmd_submit(args) -> int:
    params = dict(args.param or [])
    try:
        archive = Path(args.archive).read_bytes() if args.archive else None
    except OSError as exc:
        _err(f"cannot read {args.archive}: {exc}")
        return EXIT_USAGE
    try:
        with _client(args) as client:
            replies = client.submit(workflow=args.workflow, archive=archive, params=params)
    except OSError as exc:
        _err(f"cannot reach gateway at {args.address}: {exc}")
        return EXIT_DOMAIN
    final = replies[-1]
    if final["type"] == "ERROR":
        _err(f"{final['code']}: {final['detail']}")
        if args.json:
            _emit(final)
        return EXIT_DOMAIN
    if args.json:
        _emit(final)
    else:
        print(f"instance\t{final['instance']}")
        for name, value in sorted(final["variables"].items()):
            print(f"{name}\t{json.dumps(value, sort_keys=True)}")
    return EXIT_OK


def cmd_status(args) -> int:
    try:
        with _client(args) as client:
            reply = client.status(args.instance)
    except OSError as exc:
        _err(f"cannot reach gateway at {args.address}: {exc}")
        return EXIT_DOMAIN
    if reply["type"] == "ERROR":
        _err(f"{reply['code']}: {reply['detail']}")
        return EXIT_DOMAIN
    _emit(reply)
    return EXIT_OK


def cmd_audit(args) -> int:
    try:
        with _client(args) as client:
            reply = client.audit(args.model)
    except OSError as exc:
        _err(f"cannot reach gateway at {args.address}: {exc}")
        return EXIT_DOMAIN
    if reply["type"] == "ERROR":
        _err(f"{reply['code']}: {reply['detail']}")
        return EXIT_DOMAIN
    records = reply["records"]
    if args.json:
        _emit(records)
        return EXIT_OK
    print("instance\tmodel\tstatus\tduration_ms\tactivities")
    for r in records:
        total = (r["finished_at"] or r["started_at"]) - r["started_at"]
        acts = ",".join(f"{a}={d:g}" for a, d in sorted(r["durations"].items()))
        print(f"{r['instance']}\t{r['model']}\t{r['status']}\t{total:g}\t{acts}")
    return EXIT_OK


# -- benchmark -------------------------------------------------------------


def cmd_bench_reservation(args) -> int:
    from .bench import bench_reservation, sweep

    if args.n < 1 or args.queue_wait < 0 or args.exec < 0:
        _err("need -n >= 1 and non-negative latencies")
        return EXIT_USAGE
    result = bench_reservation(args.n, args.queue_wait, args.exec, args.seed)
    if args.json:
        _emit(result.to_dict())
    else:
        print("n\tqueue_wait_ms\texec_ms\tshared_ms\treserved_ms\tsaving_ms")
        print(f"{result.n}\t{result.queue_wait_ms:g}\t{result.exec_ms:g}\t{result.shared.makespan_ms:g}"
              f"\t{result.reserved.makespan_ms:g}\t{result.saving_ms:g}")
    if args.plot or args.csv:
        from .report import plot_makespans, write_csv

        results = sweep(args.n, args.queue_wait, args.exec, args.seed)
        if args.plot:
            _err(f"wrote {plot_makespans(results, args.plot)}")
        if args.csv:
            _err(f"wrote {write_csv(results, args.csv)}")
    if not result.variables_match:
        _err("reservation changed the workflow variables")
        return EXIT_DOMAIN
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="duorch", description="Run hybrid quantum-classical workflows with their environments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pack", help="pack an application directory into a .qaa archive")
    s.add_argument("dir")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("validate", help="check an archive and list its problems")
    s.add_argument("file")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("plan", help="print the deployment stages of a topology")
    s.add_argument("topology")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("serve", help="run the gateway with engine, provisioner and QPU simulator")
    s.add_argument("-c", "--config")
    s.add_argument("--listen")
    s.add_argument("--lifecycle", choices=("per_run", "keep_alive"))
    s.add_argument("--reservation", choices=("off", "auto"))
    s.set_defaults(func=cmd_serve)

    for name, func, helptext in (("submit", cmd_submit, "send RUN or RUN_ARCHIVE and wait for the result"),
                                 ("status", cmd_status, "query an instance"),
                                 ("audit", cmd_audit, "list finished runs")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("-a", "--address", required=True)
        s.add_argument("--timeout", type=float, default=300.0)
        s.add_argument("--json", action="store_true")
        s.set_defaults(func=func)
        if name == "submit":
            g = s.add_mutually_exclusive_group(required=True)
            g.add_argument("--archive")
            g.add_argument("--workflow")
            s.add_argument("-p", "--param", type=_param, action="append", metavar="NAME=VALUE")
        elif name == "status":
            s.add_argument("instance")
        else:
            s.add_argument("--model")

    s = sub.add_parser("bench-reservation", help="hybrid-loop makespan with and without a QPU session")
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--queue-wait", type=float, default=500.0)
    s.add_argument("--exec", type=float, default=100.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true")
    s.add_argument("--plot", help="write a makespan-vs-N figure (PNG) here")
    s.add_argument("--csv", help="write the makespan-vs-N table here")
    s.set_defaults(func=cmd_bench_reservation)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
