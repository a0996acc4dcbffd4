"""Step 1: run one replanning scenario end to end.

Simulated perception: the full world is known to the harness, the planner
only sees obstacles within the sensing range of the vehicle's current
position. A new snapshot is published only when the visible set changes.

Outputs (in --out):
    trajectory.csv          sampled rows + control points (bench/export.py)
    trajectory_plot.py      companion plot script
    events.log              one planner event per line
    stats.csv               per-component timing rows (avg/max/std)
    summary.json            counts, trajectory stats, invariant checks

Usage:
    python -m bench run scenarios/pillars.json [--set planner.mode=active]
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from bench import MAX_AXIS_ACCELERATION, MAX_AXIS_VELOCITY, SAMPLE_STEP
from bench.export import export_trajectory
from bench.scenario import Scenario
from planner.bspline import infeasible_spans
from planner.env_map import OccupancyWorld, visible_obstacles
from planner.replanner import (
    PlanState,
    committed_trajectory,
    format_event,
    init_plan,
    parse_event_line,
    step,
)
from planner.trajectory import BsplineTrajectory

log = logging.getLogger(__name__)

COMPONENTS = {
    "rbk": ("replan", "rbk_time"),
    "tube_expansion": ("opt", "tube_time"),
    "trajectory_opt": ("opt", "opt_time"),
}
CLEARANCE_SAMPLES = 20


@dataclass
class RunStats:
    timing: Dict[str, Dict[str, float]] = field(default_factory=dict)
    replans: int = 0
    replan_failures: int = 0
    collision_replans: int = 0
    opts: int = 0
    stops: int = 0
    goals: int = 0
    mean_velocity: float = 0.0
    max_acceleration: float = 0.0
    length: float = 0.0
    duration: float = 0.0
    success: bool = False

    def timing_frame(self) -> pd.DataFrame:
        rows = [{"component": name, **row} for name, row in self.timing.items()]
        return pd.DataFrame(rows, columns=["component", "n", "avg", "max", "std"])


def _timing_row(values: List[float]) -> Dict[str, float]:
    if not values:
        return {"n": 0, "avg": 0.0, "max": 0.0, "std": 0.0}
    arr = np.asarray(values, dtype=float)
    return {"n": len(arr), "avg": float(arr.mean()), "max": float(arr.max()),
            "std": float(arr.std())}


def stats_from_events(lines: Iterable[str]) -> RunStats:
    """Timing rows and counts recomputed from event log lines."""
    events = [parse_event_line(l) for l in lines if l.strip()]
    stats = RunStats()
    samples: Dict[str, List[float]] = {name: [] for name in COMPONENTS}
    samples["total_opt"] = []
    for ev in events:
        kind, d = ev["event"], ev["detail"]
        for name, (src, key) in COMPONENTS.items():
            if kind == src and key in d:
                samples[name].append(float(d[key]))
        if kind == "opt":
            stats.opts += 1
            samples["total_opt"].append(float(d["tube_time"]) + float(d["opt_time"]))
        elif kind == "replan":
            stats.replans += 1
            stats.collision_replans += d.get("trigger") == "collision-detected"
        elif kind == "replan_failed":
            stats.replan_failures += 1
        elif kind == "stop":
            stats.stops += 1
        elif kind == "goal":
            stats.goals += 1
    stats.timing = {name: _timing_row(vals) for name, vals in samples.items()}
    return stats


def trajectory_stats(traj: BsplineTrajectory) -> Dict[str, float]:
    samples = traj.sample(SAMPLE_STEP, max_order=2)
    speed = np.linalg.norm(samples[1], axis=1)
    return {
        "mean_velocity": float(speed.mean()) if len(speed) else 0.0,
        "max_acceleration": float(np.max(np.abs(samples[2]))) if len(speed) else 0.0,
        "length": traj.length(),
        "duration": traj.duration,
    }


def invariant_report(state: PlanState, world: OccupancyWorld) -> Dict:
    """Feasibility, clearance and derivative-bound checks on the executed plan."""
    traj = BsplineTrajectory(state.points, state.spec, state.t0)
    pos, _ = traj.dense_positions(CLEARANCE_SAMPLES)
    clear = world.clearance(pos)
    vmax = traj.max_abs_derivative(1)
    amax = traj.max_abs_derivative(2)
    return {
        "infeasible_spans": len(infeasible_spans(state.spec, state.points)),
        "min_clearance": float(np.min(clear)),
        "collisions": int(np.sum(clear <= world.delta_r)),
        "max_axis_velocity": float(np.max(vmax)),
        "max_axis_acceleration": float(np.max(amax)),
        "velocity_ok": bool(np.all(vmax <= MAX_AXIS_VELOCITY + 1e-6)),
        "acceleration_ok": bool(np.all(amax <= MAX_AXIS_ACCELERATION + 1e-6)),
    }


class Perception:
    """Crops the full world to the sensing sphere, reusing unchanged snapshots."""

    def __init__(self, world: OccupancyWorld, sensing_range: float):
        self.world = world
        self.sensing_range = sensing_range
        self._visible: Optional[np.ndarray] = None
        self._snapshot: Optional[OccupancyWorld] = None
        self.rebuilds = 0

    def snapshot(self, position: np.ndarray) -> OccupancyWorld:
        idx = visible_obstacles(self.world, position, self.sensing_range)
        if self._snapshot is None or not np.array_equal(idx, self._visible):
            self._visible = idx
            self._snapshot = self.world.crop(position, self.sensing_range)
            self.rebuilds += 1
        return self._snapshot


def simulate(scenario: Scenario, world: Optional[OccupancyWorld] = None) -> Dict:
    """init_plan + step loop until done, halted or out of time."""
    world = world or scenario.build_world()
    config = scenario.planner_config()
    sim = scenario.data["sim"]
    dt_sim, max_time = float(sim["step"]), float(sim["max_time"])
    start = world.center(world.cell_of(np.asarray(scenario.data["start"], dtype=float)))
    goals = [world.center(world.cell_of(g)) for g in scenario.goals()]
    perception = Perception(world, config.sensing_range)

    t_start = time.perf_counter()
    try:
        state = init_plan(goals, perception.snapshot(start), config, start)
    except (RuntimeError, ValueError) as e:
        log.warning("init failed: %s", e)
        return {"state": None, "error": str(e), "perception": perception, "world": world,
                "wall_time": time.perf_counter() - t_start}

    while not (state.done or state.halted) and state.clock - state.t0 < max_time:
        snap = perception.snapshot(state.position())
        step(state, snap, dt_sim)
    return {"state": state, "error": None, "perception": perception, "world": world,
            "wall_time": time.perf_counter() - t_start}


def run_scenario(scenario: Scenario, out_dir: Path, sample_step: float = SAMPLE_STEP) -> Dict:
    """Run, write every output file, and return the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = simulate(scenario)
    state: Optional[PlanState] = result["state"]

    lines = [format_event(ev) for ev in state.events] if state else []
    (out_dir / "events.log").write_text("\n".join(lines) + ("\n" if lines else ""))
    stats = stats_from_events(lines)

    summary = {"scenario": scenario.name, "error": result["error"],
               "wall_time": result["wall_time"],
               "snapshots": result["perception"].rebuilds}
    if state is not None:
        export_trajectory(committed_trajectory(state), out_dir / "trajectory.csv", sample_step)
        traj = BsplineTrajectory(state.points[:state.commit_end], state.spec, state.t0)
        for key, val in trajectory_stats(traj).items():
            setattr(stats, key, val)
        checks = invariant_report(state, result["world"])
        stats.success = bool(state.done and not state.halted and checks["collisions"] == 0
                             and checks["infeasible_spans"] == 0)
        summary.update(checks=checks, halted=state.halted, done=state.done,
                       sim_time=state.clock - state.t0)

    stats.timing_frame().to_csv(out_dir / "stats.csv", index=False)
    summary["stats"] = asdict(stats)
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def print_report(summary: Dict) -> None:
    stats = summary["stats"]
    print(f"Scenario {summary['scenario']}: success={stats['success']}")
    if summary.get("error"):
        print(f"  init failed: {summary['error']}")
        return
    print(f"{'component':<16}{'n':>6}{'avg [s]':>11}{'max [s]':>11}{'std [s]':>11}")
    for name, row in stats["timing"].items():
        print(f"{name:<16}{row['n']:>6}{row['avg']:>11.4f}{row['max']:>11.4f}{row['std']:>11.4f}")
    print(f"\nReplans: {stats['replans']} ({stats['collision_replans']} on collision, "
          f"{stats['replan_failures']} failed) | Opt. calls: {stats['opts']} | "
          f"stops: {stats['stops']} | goals reached: {stats['goals']}")
    print(f"Mean velocity {stats['mean_velocity']:.2f} m/s | max acceleration "
          f"{stats['max_acceleration']:.2f} m/s^2 | length {stats['length']:.2f} m | "
          f"duration {stats['duration']:.2f} s")
    c = summary["checks"]
    print(f"Min clearance {c['min_clearance']:.3f} m | collisions {c['collisions']} | "
          f"infeasible spans {c['infeasible_spans']} | max |v| {c['max_axis_velocity']:.2f} | "
          f"max |a| {c['max_axis_acceleration']:.2f}")
