"""Trajectory files: sampled rows plus the control points that produced them.

    # units: t [s], x y z [m], vx vy vz [m/s], ax ay az [m/s^2]
    # k=6 dt=0.6 t0=0.0
    t,x,y,z,vx,vy,vz,ax,ay,az
    ...
    # control_points
    # x,y,z
    ...

Comment lines keep the file readable with pandas.read_csv(comment="#").
"""

from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from bench import SAMPLE_STEP
from planner.bspline import UniformBsplineSpec
from planner.replanner import PlanState
from planner.trajectory import BsplineTrajectory

COLUMNS = ["t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az"]
CONTROL_MARK = "# control_points"

PLOT_TEMPLATE = '''"""Plot {data} (generated by `python -m bench export`)."""
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv("{data}", comment="#")
fig, axes = plt.subplots(1, 3, figsize=(15, 4))
axes[0].plot(df["x"], df["y"])
axes[0].set_aspect("equal")
axes[0].set_title("path (top view) [m]")
for col in ("vx", "vy", "vz"):
    axes[1].plot(df["t"], df[col], label=col)
axes[1].set_title("velocity [m/s]")
axes[1].legend()
for col in ("ax", "ay", "az"):
    axes[2].plot(df["t"], df[col], label=col)
axes[2].set_title("acceleration [m/s^2]")
axes[2].legend()
fig.tight_layout()
fig.savefig("{png}", dpi=150)
print("Chart -> {png}")
'''


def _as_trajectory(plan: Union[PlanState, BsplineTrajectory]) -> BsplineTrajectory:
    if isinstance(plan, BsplineTrajectory):
        return plan
    return BsplineTrajectory(plan.points, plan.spec, plan.t0)


def export_trajectory(plan: Union[PlanState, BsplineTrajectory], path: Path,
                      step: float = SAMPLE_STEP, plot_script: bool = True) -> Dict[str, Path]:
    """Write sampled rows and control points; optionally a companion plot script."""
    traj = _as_trajectory(plan)
    if len(traj.points) == 0:
        raise ValueError("Cannot export an empty plan")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = traj.sample(step, max_order=2)
    rows = np.column_stack([samples["t"], samples[0], samples[1], samples[2]])

    with open(path, "w") as f:
        f.write("# units: t [s], x y z [m], vx vy vz [m/s], ax ay az [m/s^2]\n")
        f.write(f"# k={traj.spec.k} dt={traj.spec.dt!r} t0={traj.t0!r}\n")
        f.write(",".join(COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
        f.write(CONTROL_MARK + "\n")
        f.write("# x,y,z\n")
        for p in traj.points:
            f.write("# " + ",".join(repr(float(v)) for v in p) + "\n")

    out = {"trajectory": path}
    if plot_script:
        script = path.with_name(path.stem + "_plot.py")
        script.write_text(PLOT_TEMPLATE.format(data=path.name, png=path.stem + ".png"))
        out["plot_script"] = script
    return out


def read_trajectory(path: Path) -> Dict:
    """Rows as a DataFrame, plus the control points, k, dt and t0 from the header."""
    path = Path(path)
    lines = path.read_text().splitlines()
    meta = {}
    points = []
    in_points = False
    for n, line in enumerate(lines, start=1):
        if line.startswith("# k="):
            meta = dict(tok.split("=", 1) for tok in line[2:].split())
        elif line == CONTROL_MARK:
            in_points = True
        elif in_points and line.startswith("# ") and line != "# x,y,z":
            try:
                points.append([float(v) for v in line[2:].split(",")])
            except ValueError:
                raise ValueError(f"{path}:{n}: bad control point {line!r}") from None
    if not meta:
        raise ValueError(f"{path}:1: missing '# k=... dt=... t0=...' header")
    rows = pd.read_csv(path, comment="#")
    spec_args = {"k": int(meta["k"]), "dt": float(meta["dt"])}
    return {"rows": rows, "points": np.array(points), "t0": float(meta["t0"]), **spec_args}


def trajectory_from_file(path: Path, spec: Optional[UniformBsplineSpec] = None) -> BsplineTrajectory:
    data = read_trajectory(path)
    spec = spec or UniformBsplineSpec(k=data["k"], dt=data["dt"])
    return BsplineTrajectory(data["points"], spec, data["t0"])
