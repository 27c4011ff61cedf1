"""Command-line entry point: plan, execute, benchmark, and export runs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness


def _parse_seeds(spec: str) -> list[int]:
    """Seed lists like '0,1,2' or ranges like '0:10' (end exclusive)."""
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        return list(range(int(lo), int(hi)))
    return [int(s) for s in spec.split(",") if s]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=None, help="output directory (or $DLO_MANIP_OUT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlo-manip",
        description="Plan and execute dual-arm DLO manipulation tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="plan a task and write the plan file")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("execute", help="plan and execute a task on the simulator")
    p.add_argument("--task", required=True)
    p.add_argument("--mode", choices=["closed-loop", "open-loop"], default="closed-loop")
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("benchmark", help="run tasks over seeds and print the summary table")
    p.add_argument("--task", action="append", required=True, help="task file (repeatable)")
    p.add_argument("--seeds", default="0:10", help="'0:10' range or '0,3,7' list")
    p.add_argument("--mode", choices=["closed-loop", "open-loop"], default="closed-loop")
    _add_common(p)

    p = sub.add_parser("export", help="split a saved run record into plottable artifacts")
    p.add_argument("--record", required=True, help="run record JSON written by 'execute'")
    _add_common(p)

    return parser


def _cmd_plan(args) -> int:
    task = harness.load_task(args.task)
    record = harness.run_task(task, mode="closed-loop", seed=args.seed)
    # Planning only: drop the execution part of the record.
    out = harness.output_dir(args.out)
    record.records = []
    paths = harness.export_artifacts(record, out)
    metrics = record.metrics
    print(f"planning {'succeeded' if metrics.planning_success else 'failed'} "
          f"in {metrics.planning_time_s:.2f}s ({metrics.planning_iterations} iterations)")
    print(f"wrote {paths['plan']}")
    return 0


def _cmd_execute(args) -> int:
    task = harness.load_task(args.task)
    record = harness.run_task(task, mode=args.mode, seed=args.seed)
    out = harness.output_dir(args.out)
    stem = f"{record.task_name}_{record.mode}_seed{record.seed}"
    record_path = out / f"{stem}_run.json"
    harness.save_run_record(record, record_path)
    harness.export_artifacts(record, out, stem=stem)
    m = record.metrics
    print(f"status: {m.status}")
    if m.planning_success:
        print(
            f"final task error: {m.final_task_error * 100:.2f} cm "
            f"(success: {m.manipulation_success}), collision time {m.collision_time_s:.2f}s, "
            f"{m.replan_count} re-plans"
        )
    print(f"wrote {record_path}")
    return 0


def _cmd_benchmark(args) -> int:
    tasks = [harness.load_task(t) for t in args.task]
    seeds = _parse_seeds(args.seeds)
    report = harness.run_benchmark(tasks, seeds, mode=args.mode)
    table = harness.format_benchmark_table(report)
    print(table)
    out = harness.output_dir(args.out)
    harness.atomic_write_text(out / "benchmark_table.txt", table + "\n")
    harness.atomic_write_text(
        out / "benchmark_records.json", json.dumps(report.to_records(), indent=1)
    )
    print(f"wrote {out / 'benchmark_table.txt'} and {out / 'benchmark_records.json'}")
    return 0


def _cmd_export(args) -> int:
    with open(args.record) as fh:
        record = json.load(fh)
    paths = harness.export_artifacts(record, harness.output_dir(args.out))
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    commands = {
        "plan": _cmd_plan,
        "execute": _cmd_execute,
        "benchmark": _cmd_benchmark,
        "export": _cmd_export,
    }
    try:
        return commands[args.command](args)
    except (harness.TaskFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
