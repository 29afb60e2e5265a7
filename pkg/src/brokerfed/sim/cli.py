"""``fedsim``: run, verify and sweep simulated federations."""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace

from ..core import UnknownGroup
from .checks import export_dot
from .engine import RunResult, run
from .fixtures import sweep, verify_run
from .scenario import InvalidScenario, load_scenario

METRIC_COLUMNS = ("round", "kind", "packets", "bytes")


def write_metrics_csv(result: RunResult, stream) -> None:
    m = result.metrics
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in m.rows():
        w.writerow(row)
    w.writerow([])
    w.writerow(["# summary", "value"])
    for kind, n in sorted(m.bytes_by_kind.items()):
        w.writerow([f"bytes.{kind}", n])
    w.writerow(["announcement_waves", len(m.announce_links)])
    w.writerow(["deliveries", sum(m.deliveries.values())])
    w.writerow(["publications", len(m.publications)])
    for reason, n in sorted(m.dropped.items()):
        w.writerow([f"dropped.{reason}", n])
    for g, r in sorted(m.convergence_round.items()):
        w.writerow([f"convergence_round.group{g}", "" if r is None else r])
    w.writerow(["quiescent", int(result.snapshot.quiescent)])
    w.writerow(["events", m.events_processed])


def _load(path: str, seed: int | None):
    scenario = load_scenario(path)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    return scenario


def cmd_run(args) -> int:
    scenario = _load(args.scenario, args.seed)
    result = run(scenario)
    if args.metrics:
        with open(args.metrics, "w", newline="") as fh:
            write_metrics_csv(result, fh)
    if args.dot is not None:
        try:
            sys.stdout.write(export_dot(result.snapshot, args.dot))
        except UnknownGroup as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    elif not args.metrics:
        write_metrics_csv(result, sys.stdout)
    return 0


def cmd_verify(args) -> int:
    scenario = _load(args.scenario, args.seed)
    verdicts = verify_run(scenario)
    for v in verdicts:
        print(v.summary())
    return 0 if all(verdicts) else 1


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    report = sweep(samples=args.samples, n_max=args.n_max, seed=args.seed, n_min=args.n_min)
    elapsed = time.perf_counter() - start
    print(f"samples={report.samples} max_n={report.max_n} max_l={report.max_l} waves={report.waves} "
          f"worst_link={report.worst_link} worst_ratio={report.worst_ratio:.3f} elapsed={elapsed:.1f}s")
    for f in report.failures:
        print(f"FAIL {f}")
    print("PASS" if report.ok else "FAIL")
    return 0 if report.ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedsim", description="Simulate a federation of pub/sub brokers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and emit metrics")
    p.add_argument("scenario")
    p.add_argument("--metrics", help="write metrics CSV here (default: stdout)")
    p.add_argument("--dot", type=int, metavar="GROUP", help="print the final mesh of GROUP as DOT")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run a scenario and every applicable check")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="overhead/convergence checks over random topologies")
    p.add_argument("--n-max", type=int, default=50)
    p.add_argument("--n-min", type=int, default=3)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidScenario, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
