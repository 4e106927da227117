"""Command-line runner for scenario files.

Exit code 0 means every assertion in the scenario held for every run; 2
means at least one violation, with a witness dump on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .errors import BoundExceeded, PcnError
from .harness import (build_simulation, evaluate_asserts, load_scenario,
                      metrics_from, run_dltc_chain)
from .simnet import Schedule, enumerate_schedules, sample_schedules


def _parse_schedule(text: Optional[str]):
    if text is None or text == "deposit-order":
        return None
    if text == "enumerate":
        return "enumerate"
    if text.startswith("seed:"):
        try:
            return Schedule(seed=int(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise SystemExit(f"unrecognized --schedule value {text!r} "
                     "(want enumerate or seed:N)")


def _write_lines(path: Optional[str], lines) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def _finish(violations) -> int:
    if not violations:
        return 0
    print("assertion violations:", file=sys.stderr)
    for violation in violations:
        print("  " + json.dumps(violation, sort_keys=True, default=str),
              file=sys.stderr)
    return 2


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pcnlab",
        description="Run a payment-network scenario and check its assertions.")
    parser.add_argument("--scenario", required=True,
                        help="scenario file path or canned scenario name")
    parser.add_argument("--mode", choices=["fulgor", "rayo"],
                        help="override the scenario's run mode")
    parser.add_argument("--schedule", default=None,
                        help="enumerate | seed:N (default: deposit order)")
    parser.add_argument("--proof-backend", choices=["revealing", "oracle"],
                        help="override the scenario's proof backend")
    parser.add_argument("--metrics", metavar="PATH",
                        help="write metrics as line-delimited JSON")
    parser.add_argument("--trace", metavar="PATH",
                        help="write the message trace as line-delimited JSON")
    parser.add_argument("--max-events", type=int, default=1000,
                        help="bound on enumerated schedules (default 1000)")
    args = parser.parse_args(argv)

    try:
        scenario = load_scenario(args.scenario)
    except PcnError as err:
        print(f"scenario error: {err}", file=sys.stderr)
        return 2

    if scenario.mode == "dltc":
        metrics = run_dltc_chain(scenario)
        _write_lines(args.metrics, [metrics])
        _write_lines(args.trace, [])
        return _finish(evaluate_asserts(scenario, metrics))

    metrics_lines = []
    trace_lines = []
    violations = []

    def build_and_run(sched) -> object:
        sim = build_simulation(scenario, sched, args.mode, args.proof_backend)
        sim.run_until_quiescent()
        return sim

    def record(sim) -> None:
        metrics = metrics_from(sim, scenario)
        metrics_lines.append(metrics)
        trace_lines.extend(sim.trace)
        for violation in evaluate_asserts(scenario, metrics):
            violations.append({"schedule": metrics["schedule"], **violation})

    schedule = _parse_schedule(args.schedule)
    try:
        if schedule == "enumerate":
            try:
                for _sched, sim in enumerate_schedules(build_and_run,
                                                       bound=args.max_events):
                    record(sim)
            except BoundExceeded:
                print(f"schedule space exceeds {args.max_events}; "
                      "sampling 16 seeded schedules instead", file=sys.stderr)
                metrics_lines.clear()
                trace_lines.clear()
                violations.clear()
                for _sched, sim in sample_schedules(build_and_run, range(16)):
                    record(sim)
            outcomes = sorted({json.dumps(
                {p: m["status"] for p, m in line["payments"].items()},
                sort_keys=True) for line in metrics_lines})
            metrics_lines.append({"kind": "summary", "runs": len(metrics_lines),
                                  "distinct_outcomes": outcomes})
        else:
            record(build_and_run(schedule))
    except PcnError as err:
        print(f"run error: {err}", file=sys.stderr)
        return 2

    _write_lines(args.metrics, metrics_lines)
    _write_lines(args.trace, trace_lines)
    return _finish(violations)


if __name__ == "__main__":
    raise SystemExit(main())
