"""Command-line front door: python -m bench run|compare|export."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from bench import DEFAULT_LOG_LEVEL, DEFAULT_OUT_DIR, DEFAULT_WORKERS, SAMPLE_STEP
from bench.export import export_trajectory, trajectory_from_file
from bench.monte_carlo import analyze, make_chart, monte_carlo_compare, write_outputs
from bench.monte_carlo import print_report as print_compare
from bench.oracles import STUDY_OBSTACLES
from bench.run_scenario import print_report, run_scenario
from bench.scenario import ScenarioError, load_scenario


def parse_grid(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid grid {text!r}: expected WxH, e.g. 14x14")
    if w < 2 or h < 2:
        raise argparse.ArgumentTypeError(f"Invalid grid {text!r}: both sides must be >= 2")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    out_default = os.getenv("BENCH_OUT_DIR", DEFAULT_OUT_DIR)
    ap = argparse.ArgumentParser(prog="python -m bench")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one replanning scenario")
    run.add_argument("scenario", type=Path)
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a scenario key, e.g. planner.mode=active")
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--step", type=float, default=SAMPLE_STEP, help="trajectory row spacing [s]")

    cmp_ = sub.add_parser("compare", help="Monte-Carlo optimality study")
    cmp_.add_argument("--trials", type=int, default=12)
    cmp_.add_argument("--grid", type=parse_grid, default=(14, 14))
    cmp_.add_argument("--obstacles", type=int, default=STUDY_OBSTACLES)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--workers", type=int,
                      default=int(os.getenv("BENCH_WORKERS", DEFAULT_WORKERS)))
    cmp_.add_argument("--dijkstra", action="store_true", help="oracle without heuristic (audit)")
    cmp_.add_argument("--out", type=Path, default=Path(out_default) / "compare")

    exp = sub.add_parser("export", help="re-sample a saved trajectory file")
    exp.add_argument("trajectory", type=Path)
    exp.add_argument("--out", type=Path, required=True)
    exp.add_argument("--step", type=float, default=SAMPLE_STEP)
    exp.add_argument("--no-plot", action="store_true")

    ap.set_defaults(out_default=out_default)
    return ap


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario, args.overrides)
    except (OSError, ScenarioError) as e:
        sys.exit(str(e))
    out = args.out or Path(args.out_default) / scenario.name
    summary = run_scenario(scenario, out, args.step)
    print_report(summary)
    print(f"\nResults -> {out}")
    return 0 if summary["stats"]["success"] else 1


def cmd_compare(args) -> int:
    rows = monte_carlo_compare(args.trials, args.grid, args.obstacles, args.seed,
                               args.workers, use_heuristic=not args.dijkstra)
    summary = analyze(rows)
    csv_path = write_outputs(rows, summary, args.out)
    print_compare(summary)
    make_chart(rows, args.out / "ratio_chart.png")
    print(f"\nResults -> {csv_path}, summary.json")
    return 0 if summary["solved"] > 0 else 1


def cmd_export(args) -> int:
    try:
        traj = trajectory_from_file(args.trajectory)
    except (OSError, ValueError) as e:
        sys.exit(str(e))
    written = export_trajectory(traj, args.out, args.step, plot_script=not args.no_plot)
    for kind, path in written.items():
        print(f"{kind} -> {path}")
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "export": cmd_export}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("BENCH_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)
