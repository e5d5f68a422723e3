"""Command-line interface.

    tracepipe run --config pipeline.yaml
    tracepipe loadgen --url http://127.0.0.1:8400 --config pipeline.yaml \
        --rate 100 --duration 60 [--verify | --paired] [--out report.json]
    tracepipe verify --config pipeline.yaml [--url http://...]
    tracepipe status --url http://... [--request-id ID]
    tracepipe hash-key [--cost N]
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import sys
import tempfile
from pathlib import Path

from .auth import DEFAULT_COST, hash_credential
from .config import ConfigError, load_config


def _load_or_die(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        print("configuration rejected:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        sys.exit(2)


def cmd_run(args) -> int:
    from .service import run_service

    config = _load_or_die(args.config)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    run_service(config)
    return 0


def _client_for_tenant(config, tenant: str):
    by_username = {c.username: c for c in config.credentials}
    for username, key in config.clients.items():
        cred = by_username.get(username)
        if cred is not None and cred.tenant == tenant:
            return username, key
    print(f"no client key for tenant {tenant!r} in config clients:", file=sys.stderr)
    sys.exit(2)


def cmd_loadgen(args) -> int:
    from .loadgen import run_load, run_paired_overhead

    config = _load_or_die(args.config)
    username, key = _client_for_tenant(config, args.tenant)
    base_url = args.url or f"http://{config.host}:{config.port}"
    if args.paired:
        report = run_paired_overhead(
            base_url, args.endpoint, args.rate, args.duration, args.size, username, key,
            workers=args.workers,
        )
    else:
        report = run_load(
            base_url, args.endpoint, args.rate, args.duration, args.size, username, key,
            tenant=args.tenant, verify=args.verify, verify_timeout_s=args.verify_timeout,
            workers=args.workers,
        )
    out = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(out)
    if args.out:
        report.write(args.out)
    if report.lost:
        print(f"LOST {report.lost} requests", file=sys.stderr)
        return 1
    if args.verify and not report.verified:
        print("not all accepted requests reached a terminal state in time", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    from .verify import render_rows, run_matrix

    config = _load_or_die(args.config)
    if args.url:
        passed, rows = run_matrix(args.url, config)
        print(render_rows(rows))
        return 0 if passed else 1
    # no running service given: bring one up on fresh state, verify, tear down
    return _verify_ephemeral(config)


def _verify_ephemeral(config) -> int:
    import socket

    from .service import ServerHandle, Service
    from .verify import render_rows, run_matrix

    with socket.socket() as s:
        s.bind((config.host, 0))
        config.port = s.getsockname()[1]
    config.poll_sources = []  # the matrix drives the HTTP surface only
    with tempfile.TemporaryDirectory(prefix="tracepipe-verify-") as tmp:
        config.data_dir = Path(tmp) / "data"
        handle = ServerHandle(Service(config))
        handle.start()
        try:
            passed, rows = run_matrix(handle.base_url, config)
        finally:
            handle.stop()
    print(render_rows(rows))
    return 0 if passed else 1


def cmd_status(args) -> int:
    import requests

    if args.request_id:
        if not (args.username and args.api_key):
            print("--username/--api-key required for status lookups", file=sys.stderr)
            return 2
        r = requests.get(
            f"{args.url}/status/{args.request_id}",
            headers={"X-Username": args.username, "X-Api-Key": args.api_key},
            timeout=15,
        )
        print(json.dumps(r.json(), indent=2))
        return 0 if r.status_code == 200 else 1
    r = requests.get(f"{args.url}/metrics", timeout=15)
    print(r.text)
    return 0 if r.status_code == 200 else 1


def cmd_hash_key(args) -> int:
    key = args.key or getpass.getpass("API key: ")
    print(hash_credential(key, cost=args.cost))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracepipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline service")
    p_run.add_argument("--config", required=True)
    p_run.set_defaults(func=cmd_run)

    p_load = sub.add_parser("loadgen", help="open-loop load generation against a running service")
    p_load.add_argument("--config", required=True, help="pipeline YAML (for client keys)")
    p_load.add_argument("--url", default=None, help="service base URL (default from config)")
    p_load.add_argument("--endpoint", default="/entryBatch")
    p_load.add_argument("--tenant", default="factory")
    p_load.add_argument("--rate", type=float, default=100.0)
    p_load.add_argument("--duration", type=float, default=60.0)
    p_load.add_argument("--size", type=int, default=512, help="payload bytes")
    p_load.add_argument("--workers", type=int, default=None)
    p_load.add_argument("--verify", action="store_true", help="wait until every accepted request is terminal")
    p_load.add_argument("--verify-timeout", type=float, default=600.0)
    p_load.add_argument("--paired", action="store_true", help="direct-vs-broker overhead measurement")
    p_load.add_argument("--out", default=None, help="write the JSON report here")
    p_load.set_defaults(func=cmd_loadgen)

    p_verify = sub.add_parser("verify", help="run the functional matrix")
    p_verify.add_argument("--config", required=True)
    p_verify.add_argument("--url", default=None, help="target a running service instead of an ephemeral one")
    p_verify.set_defaults(func=cmd_verify)

    p_status = sub.add_parser("status", help="query request status or system metrics")
    p_status.add_argument("--url", required=True)
    p_status.add_argument("--request-id", default=None)
    p_status.add_argument("--username", default=None)
    p_status.add_argument("--api-key", default=None)
    p_status.set_defaults(func=cmd_status)

    p_hash = sub.add_parser("hash-key", help="hash an API key for the credentials section")
    p_hash.add_argument("--cost", type=int, default=DEFAULT_COST)
    p_hash.add_argument("--key", default=None, help="read from the terminal when omitted")
    p_hash.set_defaults(func=cmd_hash_key)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
