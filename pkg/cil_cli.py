# -*- coding: utf-8 -*-
"""
Command line entry point.

    python cil_cli.py run --config configs/synthetic_b0_5steps.json
    python cil_cli.py ablate --config configs/synthetic_b0_5steps.json --axis components --workers 2
    python cil_cli.py plot --records "runs/**/records.jsonl"
    python cil_cli.py plot --schedule --kind sigmoid
    python cil_cli.py vmf-check --report runs/vmf_check.json

Exit codes: 0 ok, 1 usage or configuration error, 2 numeric or invariant failure.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import texttable
from dotenv import load_dotenv

from cil_errors import CILError, UsageError
from experiment_runner import ABLATION_AXES, OUTPUT_ROOT_ENV, ResultRecord, ablate, load_config, run
from mc_mix import MixSchedule
from plots import collect_records, plot_records, plot_schedule
from vmf_check import run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def format_records(records: Sequence[ResultRecord]) -> str:
    table = texttable.Texttable(max_width=120)
    table.header(["Run", "Mix", "Seed", "Avg CNN", "Last CNN", "Avg NME", "Last NME", "Align", "Time (s)"])
    table.set_cols_align(["l", "l", "r", "r", "r", "r", "r", "r", "r"])
    table.set_cols_valign(["m"] * 9)
    for r in records:
        table.add_row([r.name, r.mix_method, r.seed, _fmt(r.average_cnn), _fmt(r.last_cnn),
                       _fmt(r.average_nme), _fmt(r.last_nme),
                       "n/a" if r.final_alignment is None else f"{r.final_alignment:.3f}", f"{r.wall_time:.1f}"])
    return table.draw()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cil_cli", description="Class-incremental learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Train and evaluate one config over its task stream")
    p_run.add_argument("--config", required=True)

    p_ablate = sub.add_parser("ablate", help="Sweep one ablation axis of a base config")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p_ablate.add_argument("--workers", type=int, default=1)

    p_plot = sub.add_parser("plot", help="Accuracy curves from records or MC-Mix schedule curves")
    target = p_plot.add_mutually_exclusive_group(required=True)
    target.add_argument("--records", help="glob of records.jsonl files")
    target.add_argument("--schedule", action="store_true")
    p_plot.add_argument("--kind", default="sigmoid", choices=["sigmoid", "linear", "step", "constant"])
    p_plot.add_argument("--gamma", type=float, default=0.5)
    p_plot.add_argument("--tau", type=float, default=0.6)
    p_plot.add_argument("--epochs", type=int, default=240)
    p_plot.add_argument("--out", default=None)

    p_check = sub.add_parser("vmf-check", help="Run the vMF numerical verification suite")
    p_check.add_argument("--report", default=None)
    p_check.add_argument("--pairs", type=int, default=50)
    p_check.add_argument("--samples", type=int, default=200_000)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    output_root = os.getenv(OUTPUT_ROOT_ENV, "runs")
    if args.command == "run":
        record = run(load_config(args.config))
        print(format_records([record]))
        return EXIT_OK
    if args.command == "ablate":
        if args.workers < 1:
            raise UsageError(f"--workers must be >= 1, got {args.workers}")
        records = ablate(load_config(args.config), args.axis, args.workers)
        print(format_records(records))
        return EXIT_OK
    if args.command == "plot":
        out_dir = args.out or os.path.join(output_root, "plots")
        if args.schedule:
            schedule = MixSchedule(kind=args.kind, gamma=args.gamma, tau=args.tau, total_epochs=args.epochs)
            paths = plot_schedule(schedule, out_dir)
        else:
            paths = plot_records(collect_records(args.records), out_dir)
        print("\n".join(paths))
        return EXIT_OK
    if args.command == "vmf-check":
        report_path = args.report or os.path.join(output_root, "vmf_check.json")
        report = run_checks(args.pairs, args.samples, report_path=report_path)
        print(f"vmf-check: {'PASS' if report['passed'] else 'FAIL'} (report: {report_path})")
        return EXIT_OK if report["passed"] else EXIT_FAILURE
    raise UsageError(f"Unknown command '{args.command}'")


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("CIL_LOG_LEVEL", "INFO").upper(),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return dispatch(args)
    except CILError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        # pydantic validation of CLI-built models
        logger.error(f"Invalid arguments: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
