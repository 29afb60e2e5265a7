"""``fedbroker``: run a federation broker or query one."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from .daemon import BindFailure, ConfigError, NodeConfig, config_path, parse_address, query_status, serve


def cmd_serve(args) -> int:
    try:
        config = NodeConfig.load(config_path(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        asyncio.run(serve(config))
    except BindFailure as exc:
        print(f"bind failure: {exc}", file=sys.stderr)
        return 3
    return 0


def cmd_status(args) -> int:
    try:
        host, port = parse_address(args.tcp)
        lines = asyncio.run(query_status(host, port, args.group))
    except (ConfigError, OSError, RuntimeError, asyncio.TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedbroker", description="Federated publish/subscribe broker.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a broker")
    p.add_argument("--config", help="node JSON config (default: $FEDBROKER_CONFIG)")
    p.add_argument("--log-level", default="INFO")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("status", help="print a broker's group state")
    p.add_argument("--tcp", required=True, metavar="HOST:PORT")
    p.add_argument("group", nargs="?", type=int)
    p.add_argument("--log-level", default="WARNING")
    p.set_defaults(func=cmd_status)

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
