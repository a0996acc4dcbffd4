"""Step 2: Monte-Carlo optimality study on small 2-D grids.

Each trial draws a random world, start span and goal, then runs:
  - the exact span-state oracle (full_span_search)
  - RBK search
  - position-only A*, its cells used directly as control points
All three share one time weight per trial, so costs compare directly.

Outputs (in --out):
    trials.csv        one row per trial
    summary.json      optimality ratios, timing, feasibility counts
    ratio_chart.png   per-trial optimality ratios (needs matplotlib)

Usage:
    python -m bench compare --trials 50 --grid 14x14 [--workers 4]
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from bench.oracles import (
    STUDY_GRID,
    STUDY_OBSTACLES,
    astar_shortest_path,
    full_span_search,
    parameterize_path_as_bspline,
    random_small_grid_instance,
)
from planner.rbk import SearchQuery, auto_lambda, rbk_search

log = logging.getLogger(__name__)

RATIO_TOL = 1e-9


def run_trial(seed: int, grid: Sequence[int] = STUDY_GRID, n_obstacles: int = STUDY_OBSTACLES,
              use_heuristic: bool = True) -> Dict:
    """One instance through all three planners; a flat, JSON-ready record."""
    inst = random_small_grid_instance(seed, grid=grid, n_obstacles=n_obstacles)
    spec, graph, world = inst["spec"], inst["graph"], inst["world"]
    lam = auto_lambda(spec, inst["V_init"], inst["V_goal"][0], graph.resolution)

    def query() -> SearchQuery:
        return SearchQuery(V_init=inst["V_init"], V_goal=inst["V_goal"], spec=spec, graph=graph,
                           lam=lam)

    row = {"seed": seed, "static_start": inst["static_start"], "lambda": lam,
           "start": list(inst["start_cell"][:2]), "goal": list(inst["goal_cell"][:2])}

    t = time.perf_counter()
    oracle = full_span_search(query(), use_heuristic=use_heuristic)
    row["oracle_time"] = time.perf_counter() - t
    row["oracle_ok"] = oracle["success"]
    row["oracle_reason"] = oracle["reason"]
    row["oracle_cost"] = oracle["cost"]
    row["oracle_expansions"] = oracle["expansions"]

    t = time.perf_counter()
    rbk = rbk_search(query())
    row["rbk_time"] = time.perf_counter() - t
    row["rbk_ok"] = rbk["success"]
    row["rbk_reason"] = rbk["reason"]
    row["rbk_cost"] = rbk["cost"]
    row["rbk_expansions"] = rbk["expansions"]
    row["rbk_step_closing"] = rbk["step_closing"]

    t = time.perf_counter()
    path = astar_shortest_path(graph, inst["start_cell"], inst["goal_cell"])
    row["astar_time"] = time.perf_counter() - t
    row["astar_ok"] = path["success"]
    row["astar_cost"] = None
    row["astar_feasible"] = None
    row["astar_violations"] = None
    if path["success"]:
        pts = np.array([world.center(c) for c in path["path"]])
        par = parameterize_path_as_bspline(pts, inst["V_init"], spec, lam, inst["V_goal"])
        row["astar_cost"] = par["cost"]
        row["astar_feasible"] = par["feasible"]
        row["astar_violations"] = len(par["violating_spans"])

    for name in ("rbk", "astar"):
        cost = row[f"{name}_cost"]
        ok = row["oracle_ok"] and cost is not None and row["oracle_cost"] > 0
        row[f"{name}_ratio"] = cost / row["oracle_cost"] if ok else None
    return row


def _run_trial_args(args) -> Dict:
    return run_trial(*args)


def monte_carlo_compare(trials: int, grid: Sequence[int] = STUDY_GRID,
                        n_obstacles: int = STUDY_OBSTACLES, seed: int = 0,
                        workers: int = 1, use_heuristic: bool = True) -> List[Dict]:
    """Trial records in seed order; trials run in parallel when workers > 1."""
    if trials < 1:
        raise ValueError(f"Invalid trials={trials}: must be >= 1")
    jobs = [(seed + i, tuple(grid), n_obstacles, use_heuristic) for i in range(trials)]
    if workers > 1:
        try:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                return list(ex.map(_run_trial_args, jobs))
        except Exception as e:
            log.warning("process pool failed (%s), running trials serially", e)
    return [_run_trial_args(j) for j in jobs]


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def analyze(rows: List[Dict]) -> Dict:
    df = pd.DataFrame(rows)
    solved = df[df["oracle_ok"] & df["rbk_ok"]]
    skipped = df[~df["oracle_ok"]]
    rbk_ratios = solved["rbk_ratio"].dropna().astype(float).tolist()
    feasible_astar = solved[solved["astar_feasible"] == True]  # noqa: E712
    astar_ratios = feasible_astar["astar_ratio"].dropna().astype(float).tolist()
    moving = df[(~df["static_start"]) & df["astar_ok"]]

    oracle_t = _mean(solved["oracle_time"].tolist())
    rbk_t = _mean(solved["rbk_time"].tolist())
    dominance = int(np.sum(feasible_astar["rbk_cost"] <= feasible_astar["astar_cost"] + RATIO_TOL))
    rbk_exp = float(solved["rbk_expansions"].sum()) if len(solved) else 0.0
    oracle_exp = float(solved["oracle_expansions"].sum()) if len(solved) else 0.0

    return {
        "trials": len(df),
        "solved": len(solved),
        "oracle_skipped": {r: int(n) for r, n in skipped["oracle_reason"].value_counts().items()},
        "rbk_failed": int(np.sum(df["oracle_ok"] & ~df["rbk_ok"])),
        "rbk_ratio": {
            "mean": _mean(rbk_ratios),
            "max": max(rbk_ratios) if rbk_ratios else None,
            "min": min(rbk_ratios) if rbk_ratios else None,
            "optimal": int(sum(abs(r - 1.0) <= 1e-6 for r in rbk_ratios)),
        },
        "astar_ratio": {
            "mean": _mean(astar_ratios),
            "max": max(astar_ratios) if astar_ratios else None,
        },
        "rbk_beats_feasible_astar": dominance,
        "astar_feasible_trials": len(feasible_astar),
        "astar_infeasible_fraction_moving_start":
            round(float(np.mean(moving["astar_feasible"] == False)), 4)  # noqa: E712
            if len(moving) else None,
        "avg_time": {
            "astar": _mean(solved["astar_time"].tolist()),
            "rbk": rbk_t,
            "oracle": oracle_t,
        },
        "oracle_vs_rbk_speedup": round(oracle_t / rbk_t, 1) if oracle_t and rbk_t else None,
        "oracle_vs_rbk_expansions": round(oracle_exp / rbk_exp, 1) if rbk_exp else None,
    }


def make_chart(rows: List[Dict], out_png: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed - skipping chart (pip install matplotlib)")
        return

    solved = [r for r in rows if r["oracle_ok"] and r["rbk_ok"]]
    x = np.arange(len(solved))
    rbk = [r["rbk_ratio"] for r in solved]
    astar = [r["astar_ratio"] if r["astar_feasible"] else np.nan for r in solved]

    fig, ax = plt.subplots(figsize=(9, 5))
    ax.bar(x - 0.2, rbk, width=0.4, color="#2e7d32", label="RBK")
    ax.bar(x + 0.2, astar, width=0.4, color="#f9a825", label="A* as control points (feasible only)")
    ax.axhline(1.0, ls="--", c="black", lw=1, label="full-scale optimum")
    ax.set_xticks(x)
    ax.set_xticklabels([str(r["seed"]) for r in solved], fontsize=8)
    ax.set_xlabel("trial seed")
    ax.set_ylabel("total cost / optimal cost")
    ax.set_title("Optimality ratio per Monte-Carlo trial")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    print(f"Chart -> {out_png}")


def write_outputs(rows: List[Dict], summary: Dict, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "trials.csv"
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return csv_path


def print_report(summary: Dict) -> None:
    print(f"Trials: {summary['trials']} | solved by oracle and RBK: {summary['solved']}"
          f" | RBK failures: {summary['rbk_failed']}")
    for reason, n in summary["oracle_skipped"].items():
        print(f"  oracle skipped {n} trial(s): {reason}")
    r = summary["rbk_ratio"]
    if r["mean"] is not None:
        print(f"RBK optimality ratio: mean {r['mean']:.3f}, min {r['min']:.3f}, "
              f"max {r['max']:.3f}, optimal in {r['optimal']} trial(s)")
    a = summary["astar_ratio"]
    if a["mean"] is not None:
        print(f"A* ratio (feasible only): mean {a['mean']:.3f}, max {a['max']:.3f}; "
              f"RBK cheaper in {summary['rbk_beats_feasible_astar']}/"
              f"{summary['astar_feasible_trials']}")
    frac = summary["astar_infeasible_fraction_moving_start"]
    if frac is not None:
        print(f"A* control points infeasible in {100 * frac:.0f}% of moving-start trials")
    t = summary["avg_time"]
    print(f"\n{'planner':<10}{'avg [s]':>12}")
    for name, val in t.items():
        print(f"{name:<10}{val if val is not None else float('nan'):>12.5f}")
    if summary["oracle_vs_rbk_speedup"]:
        print(f"RBK is {summary['oracle_vs_rbk_speedup']}x faster than the full-scale search.")
    if summary["oracle_vs_rbk_expansions"]:
        print(f"The full-scale search expands {summary['oracle_vs_rbk_expansions']}x more nodes.")
