"""Ground-truth and baseline planners for the small-grid optimality study.

  - full_span_search: exact A* (or Dijkstra) over states made of the k-1
    most recent lattice cells; optimal for the RBK objective, but the state
    space grows like M^(k-1) per cell
  - astar_shortest_path: position-only A* with Euclidean edges
  - parameterize_path_as_bspline: use the A* cells directly as control
    points and report which spans break the derivative bounds
  - random_small_grid_instance: Monte-Carlo scenario generator
"""

import heapq
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from planner.bspline import (
    UniformBsplineSpec,
    check_span_feasible,
    infeasible_spans,
    span_control_cost,
    spans_cost,
    spans_feasible,
    trajectory_cost,
)
from planner.env_map import GridGraph, build_world
from planner.rbk import SearchQuery, TimeToGo, auto_lambda, goal_append_spans

log = logging.getLogger(__name__)

MAX_STATE_SPACE = 1e8
MAX_ORACLE_EXPANSIONS = 2_000_000

STUDY_GRID = (14, 14)
STUDY_OBSTACLES = 6
STUDY_RESOLUTION = 1.0
STUDY_CONNECTIVITY = 8
STUDY_CLEARANCES = (0.5, 0.25, 0.0)
STUDY_STATIC_SHARE = 0.25           # share of trials starting from hover
STUDY_DT = 1.5


def study_spec() -> UniformBsplineSpec:
    """Quintic snap-cost splines on one-metre cells.

    At 1.5 s knots a one-cell velocity change per axis passes the bounds
    (peak derivative control points 2.28/dt and 5.33/dt^2); a hop out and
    back or an instant reversal does not.
    """
    return UniformBsplineSpec(k=6, dt=STUDY_DT, weights={4: 1.0},
                              bounds={1: (2.0, 2.0, 2.0), 2: (3.0, 3.0, 3.0)})


# ---------------------------------------------------------------------------
# Full-scale span search
# ---------------------------------------------------------------------------

def full_span_search(query: SearchQuery, use_heuristic: bool = True,
                     max_state_space: float = MAX_STATE_SPACE,
                     max_expansions: int = MAX_ORACLE_EXPANSIONS) -> Dict:
    """Optimal search over (k-1)-cell span states.

    A state is the tuple of the k-1 most recent control points; the start
    span's older points enter as labelled seeds. Nodes may be reopened, so
    the result is optimal whenever the heuristic is admissible.
    """
    spec, graph, world = query.spec, query.graph, query.graph.world
    k, dt = spec.k, spec.dt
    free_cells = int(np.sum(~world.occupied[graph.level]))
    estimate = float(len(graph.offsets)) ** (k - 1) * free_cells
    lam = auto_lambda(spec, query.V_init, query.V_goal[0], graph.resolution) \
        if query.lam is None else float(query.lam)
    base = {"success": False, "points": None, "cost": None, "control_cost": None,
            "time_cost": None, "expansions": 0, "lambda": lam,
            "state_space_estimate": estimate, "reason": None}
    if estimate > max_state_space:
        base["reason"] = "state_space"
        base["detail"] = (f"estimated {estimate:.3g} span states exceeds budget "
                          f"{max_state_space:.3g} ({len(graph.offsets)}-connect, k={k}, "
                          f"{free_cells} free cells)")
        return base

    ok, margins = check_span_feasible(spec, query.V_init)
    if not ok:
        raise ValueError(f"Start span violates derivative bounds (margins {margins})")

    goal_cell = query.lattice_cell(query.V_goal[0])
    time_to_go = TimeToGo(query, lam) if use_heuristic else None
    lattice = query.lattice_map()

    # keys: ("seed", i) for older start points, lattice cells otherwise
    positions: Dict[object, np.ndarray] = {("seed", i): query.V_init[i] for i in range(k - 1)}
    root_cell = (0, 0, 0)
    positions[root_cell] = query.V_init[-1]
    start_state = tuple([("seed", i) for i in range(1, k - 1)] + [root_cell])
    g0 = span_control_cost(spec, query.V_init) + lam * dt

    def point(key) -> np.ndarray:
        if key not in positions:
            positions[key] = query.lattice_point(key)
        return positions[key]

    h_memo: Dict[object, float] = {}

    def h_cost(cell) -> float:
        if time_to_go is None:
            return 0.0
        if cell not in h_memo:
            h_memo[cell] = float(time_to_go(np.array(cell))[0])
        return h_memo[cell]

    # ("goal", state) marks the terminal node after the goal span is appended
    best: Dict[object, float] = {start_state: g0}
    parent: Dict[object, object] = {start_state: None}
    counter = 0
    heap: List[Tuple[float, float, int, object]] = []

    def push(state, g):
        nonlocal counter
        counter += 1
        last = state[1][-1] if state[0] == "goal" else state[-1]
        heapq.heappush(heap, (g + (0.0 if state[0] == "goal" else h_cost(last)), g, counter, state))

    def goal_terminal(state, g):
        recent = np.array([point(c) for c in state])
        gspans = goal_append_spans(spec, recent, query.V_goal)
        if not np.all(spans_feasible(spec, gspans)):
            return
        gt = g + float(np.sum(spans_cost(spec, gspans))) + lam * dt * (k - 1)
        key = ("goal", state)
        if gt < best.get(key, np.inf):
            best[key] = gt
            parent[key] = state
            push(key, gt)

    push(start_state, g0)
    if root_cell == goal_cell:
        goal_terminal(start_state, g0)

    expansions = 0
    while heap:
        f, g, _, state = heapq.heappop(heap)
        if g > best.get(state, np.inf):
            continue
        if state[0] == "goal":
            chain = []
            s = state[1]
            while s is not None:
                chain.append(s[-1])
                s = parent[s]
            chain = chain[::-1]
            pts = np.vstack([query.V_init[:-1]] + [point(c)[None, :] for c in chain[:-1]]
                            + [query.V_goal])
            cost = trajectory_cost(spec, pts, lam)
            base.update(success=True, points=pts, cost=g, control_cost=g - cost["time_cost"],
                        time_cost=cost["time_cost"], expansions=expansions)
            return base
        expansions += 1
        if expansions > max_expansions:
            base.update(reason="timeout", expansions=expansions)
            return base

        last = state[-1]
        cand = np.asarray(last)[None, :] + graph.offsets
        keys = [tuple(c) for c in cand.tolist()]
        cand_pts = lattice.points(cand)
        free = lattice.free_cells(cand)
        idx = np.flatnonzero(free)
        if not len(idx):
            continue
        prev = np.array([point(c) for c in state])
        spans = np.concatenate([np.broadcast_to(prev, (len(idx), k - 1, 3)),
                                cand_pts[idx][:, None, :]], axis=1)
        feasible = spans_feasible(spec, spans)
        costs = spans_cost(spec, spans)
        for j, ok_span, c in zip(idx, feasible, costs):
            if not ok_span:
                continue
            key = keys[j]
            positions.setdefault(key, cand_pts[j])
            nxt = state[1:] + (key,)
            g2 = g + float(c) + lam * dt
            if g2 < best.get(nxt, np.inf):
                best[nxt] = g2
                parent[nxt] = state
                push(nxt, g2)
            if key == goal_cell:
                goal_terminal(nxt, g2)

    base.update(reason="no_path", expansions=expansions)
    return base


# ---------------------------------------------------------------------------
# Position-only A*
# ---------------------------------------------------------------------------

def astar_shortest_path(graph: GridGraph, start_cell: Sequence[int], goal_cell: Sequence[int]) -> Dict:
    """Shortest M-connect path under Euclidean edge lengths, ties broken by (f, g, cell)."""
    start = tuple(int(x) for x in start_cell)
    goal = tuple(int(x) for x in goal_cell)
    if not graph.is_free_cell(start) or not graph.is_free_cell(goal):
        return {"success": False, "path": None, "length": None, "reason": "blocked"}
    h = graph.resolution

    def dist(c) -> float:
        return h * float(np.linalg.norm(np.subtract(c, goal)))

    g_best = {start: 0.0}
    came_from = {start: None}
    closed = set()
    heap = [(dist(start), 0.0, start)]
    while heap:
        f, g, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal:
            path = []
            while cell is not None:
                path.append(cell)
                cell = came_from[cell]
            return {"success": True, "path": path[::-1], "length": g, "reason": None}
        for nbr, length in graph.neighbors(cell):
            if nbr in closed:
                continue
            g2 = g + length
            if g2 < g_best.get(nbr, np.inf):
                g_best[nbr] = g2
                came_from[nbr] = cell
                heapq.heappush(heap, (g2 + dist(nbr), g2, nbr))
    return {"success": False, "path": None, "length": None, "reason": "no_path"}


def parameterize_path_as_bspline(path_points: np.ndarray, V_init: np.ndarray,
                                 spec: UniformBsplineSpec, lam: float,
                                 V_goal: Optional[np.ndarray] = None) -> Dict:
    """Append the path directly to V_init as control points; report violations.

    path_points[0] is taken to coincide with V_init[-1]. With V_goal the
    goal span's remaining points close the sequence, as in RBK.
    """
    path_points = np.atleast_2d(np.asarray(path_points, dtype=float))
    if path_points.shape[0] == 0:
        raise ValueError("Path must not be empty")
    parts = [np.asarray(V_init, dtype=float), path_points[1:]]
    if V_goal is not None:
        parts.append(np.asarray(V_goal, dtype=float)[1:])
    pts = np.vstack(parts)
    bad = infeasible_spans(spec, pts)
    cost = trajectory_cost(spec, pts, lam)
    return {"points": pts, "feasible": not bad, "violating_spans": bad, **cost}


# ---------------------------------------------------------------------------
# Monte-Carlo instances
# ---------------------------------------------------------------------------

def random_small_grid_instance(seed: int, spec: Optional[UniformBsplineSpec] = None,
                               grid: Sequence[int] = STUDY_GRID,
                               n_obstacles: int = STUDY_OBSTACLES,
                               connectivity: int = STUDY_CONNECTIVITY,
                               resolution: float = STUDY_RESOLUTION,
                               static_share: float = STUDY_STATIC_SHARE,
                               max_tries: int = 1000) -> Dict:
    """Random blocked cells, random start cell with a random feasible span, random goal."""
    spec = spec or study_spec()
    rng = np.random.default_rng(seed)
    k = spec.k
    dims = (int(grid[0]), int(grid[1]), 1)
    cells = [(x, y, 0) for x in range(dims[0]) for y in range(dims[1])]

    blocked_idx = rng.choice(len(cells), size=min(n_obstacles, len(cells) - 2), replace=False)
    blocked = {cells[i] for i in blocked_idx}
    obstacles = np.array([[c[0] * resolution, c[1] * resolution, 0.0] for c in sorted(blocked)])
    world = build_world(obstacles.reshape(-1, 3), resolution, dims, STUDY_CLEARANCES)
    graph = GridGraph(world, connectivity, level="rbk")
    free = [c for c in cells if graph.is_free_cell(c)]
    steps = [tuple(o) for o in graph.offsets] + [(0, 0, 0)]

    for _ in range(max_tries):
        start = free[rng.integers(len(free))]
        if rng.random() < static_share:
            pattern = [start] * k
        else:
            # walk backwards from the start cell
            pattern = [start]
            for _ in range(k - 1):
                step = steps[rng.integers(len(steps))]
                pattern.append(tuple(a - b for a, b in zip(pattern[-1], step)))
            pattern = pattern[::-1]
        if not all(graph.is_free_cell(c) for c in pattern):
            continue
        V_init = np.array([world.center(c) for c in pattern])
        if not check_span_feasible(spec, V_init)[0]:
            continue
        goal = free[rng.integers(len(free))]
        if goal == start:
            continue
        V_goal = np.repeat(world.center(goal)[None, :], k, axis=0)
        return {"seed": seed, "world": world, "graph": graph, "spec": spec,
                "V_init": V_init, "V_goal": V_goal, "start_cell": start, "goal_cell": goal,
                "static_start": len(set(pattern)) == 1}
    raise RuntimeError(f"No feasible start pattern found for seed {seed} after {max_tries} tries")
