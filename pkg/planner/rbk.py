"""Greedy B-spline kinodynamic (RBK) search.

A* over lattice cells where each node also remembers its k-1 predecessor
control points, so the span ending at a neighbor is known at expansion time:
  - the span is checked with the linear derivative-bound test and dropped if
    infeasible (never penalized)
  - its closed-form control cost plus lam*dt is added to g
  - a cell is closed by the first span that pops it (greedy: the cell, not
    the span, keys the open/closed sets)

The lattice is anchored at the newest start point, so a start span made of
optimized, off-grid points still yields lattice neighbors. The goal cell is
only admitted when the spans that append the goal span are feasible too.

Greedy closing can strand the goal behind cells claimed by spans that
cannot turn or stop in time. When the open set runs dry, the search is
repeated once with the last step added to the closing key.

Objective: sum of span control costs + lam * duration, duration = spans * dt.
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from planner.bspline import (
    Span,
    UniformBsplineSpec,
    check_span_feasible,
    span_control_cost,
    spans_cost,
    spans_feasible,
    trajectory_spans,
)
from planner.env_map import AnchoredLattice, GridGraph

log = logging.getLogger(__name__)

V_MAX = 3.5                 # Euclidean speed used by the time heuristic
BUDGET_PER_CELL = 10        # node expansions allowed per map cell
ALIGN_TOL = 1e-6
OPEN, CLOSED = "open", "closed"

Cell = Tuple[int, int, int]


class SearchNode:
    __slots__ = ("cell", "point", "predecessor", "g", "f", "state")

    def __init__(self, cell: Optional[Cell], point: np.ndarray,
                 predecessor: Optional["SearchNode"], g: float = 0.0, f: float = 0.0):
        self.cell = cell
        self.point = point
        self.predecessor = predecessor
        self.g = g
        self.f = f
        self.state = OPEN


@dataclass
class SearchQuery:
    V_init: np.ndarray
    V_goal: np.ndarray
    spec: UniformBsplineSpec
    graph: GridGraph
    lam: Optional[float] = None          # None: scaled automatically
    v_max: float = V_MAX
    max_expansions: Optional[int] = None
    step_closing_fallback: bool = True
    lattice: Optional[AnchoredLattice] = field(default=None, repr=False)

    def __post_init__(self):
        self.V_init = np.asarray(self.V_init, dtype=float)
        self.V_goal = np.asarray(self.V_goal, dtype=float)
        k = self.spec.k
        if self.V_init.shape != (k, 3) or self.V_goal.shape != (k, 3):
            raise ValueError(f"Start and goal spans must be ({k}, 3), got "
                             f"{self.V_init.shape} and {self.V_goal.shape}")
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"Invalid lambda={self.lam}: must be >= 0")
        if not self.v_max > 0:
            raise ValueError(f"Invalid v_max={self.v_max}: must be > 0")
        if self.lattice is not None and not np.array_equal(self.lattice.anchor, self.anchor):
            raise ValueError(f"Lattice anchored at {self.lattice.anchor}, "
                             f"start span ends at {self.anchor}")

    @property
    def anchor(self) -> np.ndarray:
        return self.V_init[-1]

    def lattice_map(self) -> AnchoredLattice:
        if self.lattice is None:
            self.lattice = AnchoredLattice(self.graph, self.anchor)
        return self.lattice

    def lattice_cell(self, point: np.ndarray) -> Cell:
        """Lattice index of a point relative to the anchor; must be aligned."""
        h = self.graph.resolution
        rel = (np.asarray(point, dtype=float) - self.anchor) / h
        cell = np.rint(rel)
        if np.max(np.abs(rel - cell)) > ALIGN_TOL:
            raise ValueError(f"Point {point} is not on the lattice anchored at {self.anchor}")
        return tuple(int(x) for x in cell)

    def lattice_point(self, cell: Cell) -> np.ndarray:
        return self.anchor + self.graph.resolution * np.asarray(cell, dtype=float)


def heuristic(point: np.ndarray, goal_point: np.ndarray, lam: float, v_max: float):
    """Time-to-go lower bound lam * ||p - p_goal|| / v_max, per row for (n, 3) input."""
    if not v_max > 0:
        raise ValueError(f"Invalid v_max={v_max}: must be > 0")
    dist = np.linalg.norm(np.asarray(point, dtype=float) - np.asarray(goal_point, dtype=float),
                          axis=-1)
    return lam * dist / v_max if np.ndim(dist) else float(lam * dist / v_max)


def heuristic_speed(query: SearchQuery) -> float:
    """The slower of v_max and one lattice step per knot; both bound the real speed."""
    return min(query.v_max, query.graph.d_max / query.spec.dt)


class TimeToGo:
    """Admissible time cost left from lattice cells.

    Every span moves the newest point by one lattice step, so the larger of
    the Euclidean bound and lam*dt per remaining step holds; the k-1 spans
    that append the goal span are owed on top.
    """

    def __init__(self, query: SearchQuery, lam: float):
        self.lam = lam
        self.dt = query.spec.dt
        self.goal_cell = np.asarray(query.lattice_cell(query.V_goal[0]))
        self.goal_point = query.V_goal[0]
        self.speed = heuristic_speed(query)
        self.reach = int(np.max(np.abs(query.graph.offsets).sum(axis=1)))
        self.tail = lam * self.dt * (query.spec.k - 1)
        self.anchor = query.anchor
        self.resolution = query.graph.resolution

    def __call__(self, cells: np.ndarray) -> np.ndarray:
        cells = np.atleast_2d(cells)
        delta = np.abs(cells - self.goal_cell)
        steps = np.maximum(delta.max(axis=1), np.ceil(delta.sum(axis=1) / self.reach))
        points = self.anchor[None, :] + self.resolution * cells
        euclid = heuristic(points, self.goal_point, self.lam, self.speed)
        return np.maximum(euclid, self.lam * self.dt * steps) + self.tail


def near_end(current: np.ndarray, goal: np.ndarray, resolution: Optional[float] = None,
             origin: Optional[np.ndarray] = None) -> bool:
    """True when the newest point of `current` sits on the goal span's first cell."""
    cur = np.asarray(current.points if isinstance(current, Span) else current, dtype=float)
    first = np.asarray(goal.points if isinstance(goal, Span) else goal, dtype=float)[0]
    cur = np.atleast_2d(cur)[-1]
    if resolution is None:
        return bool(np.allclose(cur, first, atol=1e-9, rtol=0.0))
    org = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    return bool(np.array_equal(np.rint((cur - org) / resolution), np.rint((first - org) / resolution)))


def retrieve_span(node: SearchNode, k: int) -> Span:
    """Stack the k-1 predecessors of node with node itself, oldest first."""
    pts = [node.point]
    cur = node
    for _ in range(k - 1):
        cur = cur.predecessor
        if cur is None:
            raise RuntimeError(f"Search chain shorter than k-1={k - 1} predecessors "
                               f"at cell {node.cell}")
        pts.append(cur.point)
    return Span(np.array(pts[::-1]))


def _chain_points(node: SearchNode) -> List[np.ndarray]:
    pts = []
    cur = node
    while cur is not None:
        pts.append(cur.point)
        cur = cur.predecessor
    return pts[::-1]


def _unit_impulse_cost(spec: UniformBsplineSpec, h: float) -> float:
    span = np.zeros((spec.k, 3))
    span[-1, 0] = h
    return span_control_cost(spec, span)


def auto_lambda(spec: UniformBsplineSpec, V_init: np.ndarray, goal_point: np.ndarray,
                resolution: float) -> float:
    """Time weight with lam*dt near the median span cost of a straight run."""
    V_init = np.asarray(V_init, dtype=float)
    direction = np.asarray(goal_point, dtype=float) - V_init[-1]
    cheb = float(np.max(np.abs(direction)))
    costs = np.zeros(0)
    if cheb > 0:
        step = resolution * direction / cheb
        run = [V_init[-1] + step * (i + 1) for i in range(spec.k)]
        pts = np.vstack([V_init, run])
        costs = spans_cost(spec, trajectory_spans(pts, spec.k)[1:])
        costs = costs[costs > 1e-12]
    ref = float(np.median(costs)) if len(costs) else _unit_impulse_cost(spec, resolution)
    return ref / spec.dt


def goal_append_spans(spec: UniformBsplineSpec, recent: np.ndarray, V_goal: np.ndarray) -> np.ndarray:
    """The k-1 hybrid spans created by appending goal points 1..k-1."""
    pts = np.vstack([recent[-(spec.k - 1):], V_goal[1:]])
    return trajectory_spans(pts, spec.k)


def _result(success: bool, reason: Optional[str], lam: float, expansions: int,
            points: Optional[np.ndarray] = None, spec: Optional[UniformBsplineSpec] = None,
            g: float = 0.0, step_closing: bool = False) -> Dict:
    out = {
        "success": success,
        "reason": reason,
        "points": points,
        "cost": None,
        "control_cost": None,
        "time_cost": None,
        "expansions": expansions,
        "lambda": lam,
        "step_closing": step_closing,
    }
    if success:
        n_spans = points.shape[0] - spec.k + 1
        time_cost = lam * spec.dt * n_spans
        out.update(cost=g, time_cost=time_cost, control_cost=g - time_cost)
    return out


def _search(query: SearchQuery, lam: float, budget: int, by_step: bool) -> Dict:
    """One best-first pass; nodes keyed by cell, or by (cell, last step) when by_step."""
    spec, graph = query.spec, query.graph
    k, dt, h = spec.k, spec.dt, graph.resolution
    lattice = query.lattice_map()
    time_to_go = TimeToGo(query, lam)
    goal_cell = tuple(int(x) for x in time_to_go.goal_cell)
    offsets = graph.offsets

    # seed the chain with the start span
    seed: Optional[SearchNode] = None
    for p in query.V_init[:-1]:
        seed = SearchNode(None, p, seed)
    root_cell: Cell = (0, 0, 0)
    root = SearchNode(root_cell, query.V_init[-1], seed)
    root.g = span_control_cost(spec, query.V_init) + lam * dt
    root.f = root.g + float(time_to_go(np.array(root_cell))[0])
    root_key = (root_cell, -1) if by_step else root_cell
    nodes: Dict[object, SearchNode] = {root_key: root}
    open_heap = [(root.f, -root.g, root_key)]
    expansions = 0

    while open_heap:
        f, neg_g, key = heapq.heappop(open_heap)
        node = nodes[key]
        if node.state == CLOSED or -neg_g != node.g:
            continue  # stale entry
        node.state = CLOSED
        expansions += 1

        if near_end(node.point, query.V_goal, h, query.anchor):
            # the goal span is appended verbatim
            pts = np.vstack(_chain_points(node)[:-1] + [query.V_goal])
            log.debug("rbk reached goal after %d expansions, cost=%.4g", expansions, node.g)
            return _result(True, None, lam, expansions, pts, spec, node.g, by_step)
        if expansions >= budget:
            log.warning("rbk expansion budget %d exhausted", budget)
            return _result(False, "timeout", lam, expansions, step_closing=by_step)

        cand_cells = np.asarray(node.cell)[None, :] + offsets
        cand_keys = [(tuple(c), j) if by_step else tuple(c)
                     for j, c in enumerate(cand_cells.tolist())]
        keep = [j for j in np.flatnonzero(lattice.free_cells(cand_cells))
                if cand_keys[j] not in nodes or nodes[cand_keys[j]].state == OPEN]
        if not keep:
            continue
        cand_pts = lattice.points(cand_cells[keep])
        prev = retrieve_span(node, k - 1).points
        spans = np.concatenate([np.broadcast_to(prev, (len(keep), k - 1, 3)),
                                cand_pts[:, None, :]], axis=1)
        feasible = spans_feasible(spec, spans)
        costs = spans_cost(spec, spans)
        h_to_go = time_to_go(cand_cells[keep])

        for j, p, ok_span, c, h_cell in zip(keep, cand_pts, feasible, costs, h_to_go):
            if not ok_span:
                continue
            child_key = cand_keys[j]
            cell = child_key[0] if by_step else child_key
            g2 = g_next = -neg_g + float(c) + lam * dt
            if cell == goal_cell:
                gspans = goal_append_spans(spec, np.vstack([prev, p[None, :]]), query.V_goal)
                if not np.all(spans_feasible(spec, gspans)):
                    continue
                g2 = g_next + float(np.sum(spans_cost(spec, gspans))) + lam * dt * (k - 1)
                h_cell = 0.0
            existing = nodes.get(child_key)
            if existing is not None and existing.g <= g2:
                continue
            child = SearchNode(cell, p, node, g2, g2 + float(h_cell))
            nodes[child_key] = child
            heapq.heappush(open_heap, (child.f, -g2, child_key))

    return _result(False, "no_path", lam, expansions, step_closing=by_step)


def rbk_search(query: SearchQuery) -> Dict:
    """Greedy kinodynamic search from V_init to V_goal.

    Returns a dict with success, points (start span ++ interior ++ goal
    span), cost split into control/time, expansions, lambda, whether the
    step-keyed fallback produced the answer, and a reason ("no_path",
    "timeout", "goal_blocked") on failure.
    """
    spec, graph = query.spec, query.graph
    k, dt = spec.k, spec.dt
    ok, margins = check_span_feasible(spec, query.V_init)
    if not ok:
        raise ValueError(f"Start span violates derivative bounds (margins {margins})")

    lam = auto_lambda(spec, query.V_init, query.V_goal[0], graph.resolution) \
        if query.lam is None else float(query.lam)
    goal_cell = query.lattice_cell(query.V_goal[0])

    if goal_cell == (0, 0, 0):
        spans = goal_append_spans(spec, query.V_init, query.V_goal)
        if np.all(spans_feasible(spec, spans)):
            g = (span_control_cost(spec, query.V_init) + float(np.sum(spans_cost(spec, spans)))
                 + lam * dt * k)
            pts = np.vstack([query.V_init, query.V_goal[1:]])
            return _result(True, None, lam, 0, pts, spec, g)
        return _result(False, "no_path", lam, 0)
    if not query.lattice_map().free_cells(np.array([goal_cell]))[0]:
        return _result(False, "goal_blocked", lam, 0)

    budget = query.max_expansions or BUDGET_PER_CELL * graph.world.num_cells
    res = _search(query, lam, budget, by_step=False)
    if res["reason"] == "no_path" and query.step_closing_fallback:
        log.info("greedy closing found no path after %d expansions, retrying keyed by step",
                 res["expansions"])
        retry = _search(query, lam, budget - res["expansions"], by_step=True)
        retry["expansions"] += res["expansions"]
        res = retry
    return res
