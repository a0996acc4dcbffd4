"""Receding-horizon replanning over a single control-point sequence.

Every point carries one label, in this order along the sequence:
  executed     its knots are in the past
  committed    within k knots of the clock; read by the trajectory server
  optimizing   the next W points, refined by the elastic back end
  unoptimized  the rest of the RBK output
Executed and committed points are never modified: replans splice new RBK
output after the last committed point, starting from the last k committed
points, so position and the first k-2 derivatives stay continuous.

Replans are triggered by a collision in the mutable part, by the goal
drawing near in the sensing range, or (active mode) by a timer. A collision
on the committed part raises the stopping policy: the plan halts and needs
a fresh init_plan.

Event lines: "t=<s> event=<kind> detail=key=value,...".
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from planner.bspline import UniformBsplineSpec
from planner.elastic import (
    TubeParams,
    check_two_level_inflation,
    colliding_spans,
    enforce_safety,
    run_elastic_optimization,
)
from planner.env_map import AnchoredLattice, GridGraph, OccupancyWorld
from planner.rbk import V_MAX, SearchQuery, rbk_search
from planner.trajectory import BsplineTrajectory

log = logging.getLogger(__name__)

WINDOW = 12
SENSING_RANGE = 4.0
MODES = ("passive", "active")
TRIGGER_KINDS = ("collision-detected", "timer", "goal-moved")
EVENT_KINDS = ("replan", "replan_failed", "opt", "commit", "stop", "goal")
TARGET_SEARCH_CELLS = 6
POINT_CLEARANCE_TOL = 1e-9


@dataclass(frozen=True)
class PlannerConfig:
    spec: UniformBsplineSpec = field(default_factory=UniformBsplineSpec)
    window: int = WINDOW
    sensing_range: float = SENSING_RANGE
    mode: str = "passive"
    timer_knots: Optional[int] = None       # active mode; default window // 2
    connectivity: int = 26
    lam: Optional[float] = None
    v_max: float = V_MAX
    tube: Optional[TubeParams] = None       # default derived from the map resolution
    max_expansions: Optional[int] = None
    target_search_cells: int = TARGET_SEARCH_CELLS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"Invalid mode={self.mode!r}: use one of {MODES}")
        if self.window < 1:
            raise ValueError(f"Invalid window={self.window}: must be >= 1")
        if not self.sensing_range > 0:
            raise ValueError(f"Invalid sensing_range={self.sensing_range}: must be > 0")
        if self.timer_knots is not None and self.timer_knots < 1:
            raise ValueError(f"Invalid timer_knots={self.timer_knots}: must be >= 1")

    @property
    def timer_period(self) -> int:
        return self.timer_knots or max(1, self.window // 2)

    def tube_params(self, resolution: float) -> TubeParams:
        if self.tube is not None:
            return self.tube
        return TubeParams.for_resolution(resolution, radius_cap=self.sensing_range)


@dataclass(frozen=True)
class ReplanTrigger:
    kind: str
    detail: object = None

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"Invalid trigger kind={self.kind!r}")


@dataclass
class PlanState:
    points: np.ndarray
    config: PlannerConfig
    world: OccupancyWorld
    goals: List[np.ndarray]
    t0: float = 0.0
    clock: float = 0.0
    executed_end: int = 0
    commit_end: int = 0
    goal_index: int = 0
    leg_origin: Optional[np.ndarray] = None
    local_target: Optional[np.ndarray] = None
    halted: bool = False
    done: bool = False
    last_timer_span: int = 0
    events: List[Dict] = field(default_factory=list)

    @property
    def spec(self) -> UniformBsplineSpec:
        return self.config.spec

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def window(self) -> int:
        return self.config.window

    @property
    def goal(self) -> np.ndarray:
        return self.goals[min(self.goal_index, len(self.goals) - 1)]

    @property
    def target_is_goal(self) -> bool:
        return self.local_target is not None and bool(np.allclose(self.local_target, self.goal))

    def current_span(self) -> int:
        return int(math.floor((self.clock - self.t0) / self.spec.dt + 1e-9))

    def optimizing_range(self) -> Tuple[int, int]:
        n = len(self.points)
        return self.commit_end, min(n, self.commit_end + self.window)

    def labels(self) -> List[str]:
        opt_lo, opt_hi = self.optimizing_range()
        out = []
        for i in range(len(self.points)):
            if i < self.executed_end:
                out.append("executed")
            elif i < self.commit_end:
                out.append("committed")
            elif i < opt_hi:
                out.append("optimizing")
            else:
                out.append("unoptimized")
        return out

    def position(self) -> np.ndarray:
        traj = committed_trajectory(self)
        return traj.evaluate(min(max(self.clock, traj.t0), traj.horizon))


def committed_trajectory(state: PlanState) -> BsplineTrajectory:
    """Executed + committed spans only; later replans cannot change it."""
    k = state.spec.k
    horizon = state.t0 + (state.commit_end - k + 1) * state.spec.dt
    return BsplineTrajectory(state.points[:state.commit_end], state.spec, state.t0, horizon)


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v).replace(",", ";").replace("=", ":")


def format_event(event: Dict) -> str:
    detail = ",".join(f"{k}={_fmt(v)}" for k, v in event["detail"].items())
    return f"t={event['t']:.6f} event={event['event']} detail={detail}"


def _parse_value(s: str):
    if s in ("True", "False"):
        return s == "True"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_event_line(line: str) -> Dict:
    head, _, detail = line.strip().partition(" detail=")
    parts = dict(tok.split("=", 1) for tok in head.split())
    if "t" not in parts or "event" not in parts:
        raise ValueError(f"Malformed event line: {line!r}")
    fields = {}
    if detail:
        for tok in detail.split(","):
            key, _, val = tok.partition("=")
            fields[key] = _parse_value(val)
    return {"t": float(parts["t"]), "event": parts["event"], "detail": fields}


def _emit(state: PlanState, events: List[Dict], kind: str, **detail) -> None:
    ev = {"t": state.clock, "event": kind, "detail": detail}
    state.events.append(ev)
    events.append(ev)
    log.debug(format_event(ev))


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def local_target(position: np.ndarray, leg_origin: np.ndarray, goal: np.ndarray,
                 sensing_range: float) -> np.ndarray:
    """Farthest point of the straight guide line origin->goal inside the sensing sphere."""
    position = np.asarray(position, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if np.linalg.norm(goal - position) <= sensing_range:
        return goal.copy()
    a = np.asarray(leg_origin, dtype=float)
    d = goal - a
    # |a + s d - x|^2 = R^2
    w = a - position
    qa, qb, qc = d @ d, 2 * (w @ d), w @ w - sensing_range ** 2
    disc = qb * qb - 4 * qa * qc
    if qa > 0 and disc >= 0:
        s = (-qb + math.sqrt(disc)) / (2 * qa)
        if 0.0 <= s <= 1.0:
            return a + s * d
    # off the guide line: head straight for the goal
    return position + sensing_range * (goal - position) / np.linalg.norm(goal - position)


def snap_target(world: OccupancyWorld, anchor: np.ndarray, target: np.ndarray,
                level: str = "rbk", search_cells: int = TARGET_SEARCH_CELLS,
                lattice: Optional[AnchoredLattice] = None) -> Optional[np.ndarray]:
    """Nearest free point of the anchored lattice to target (None if none nearby).

    With a lattice, only cells it can reach from the anchor qualify.
    """
    h = world.resolution
    base = np.rint((np.asarray(target) - anchor) / h).astype(int)
    r = np.arange(-search_cells, search_cells + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    if world.dims[2] == 1:
        offs = offs[offs[:, 2] == 0]
    cand = anchor + h * (base + offs)
    if lattice is None:
        free = world.free_mask(cand, level)
    else:
        free = lattice.reachable_cells(base + offs)
    if not np.any(free):
        return None
    cand, offs = cand[free], offs[free]
    dist = np.linalg.norm(cand - target, axis=1)
    order = np.lexsort((offs[:, 2], offs[:, 1], offs[:, 0], np.round(dist, 12)))
    return cand[order[0]]


# ---------------------------------------------------------------------------
# Planning steps
# ---------------------------------------------------------------------------

def _replan(state: PlanState, trigger: ReplanTrigger, events: List[Dict]) -> bool:
    cfg, spec, world = state.config, state.spec, state.world
    k = spec.k
    V_init = state.points[state.commit_end - k:state.commit_end]
    position = state.position()
    target = local_target(position, state.leg_origin, state.goal, cfg.sensing_range)
    t_start = time.perf_counter()
    graph = GridGraph(world, cfg.connectivity, level="rbk")
    lattice = AnchoredLattice(graph, V_init[-1])
    snapped = snap_target(world, V_init[-1], target, "rbk", cfg.target_search_cells, lattice)
    if snapped is None:
        _emit(state, events, "replan_failed", trigger=trigger.kind, reason="goal_blocked",
              rbk_time=time.perf_counter() - t_start)
        return False
    state.local_target = state.goal.copy() if np.allclose(target, state.goal) else target
    query = SearchQuery(V_init=V_init, V_goal=np.repeat(snapped[None, :], k, axis=0), spec=spec,
                        graph=graph, lam=cfg.lam, v_max=cfg.v_max,
                        max_expansions=cfg.max_expansions, lattice=lattice)
    try:
        res = rbk_search(query)
    except ValueError as e:
        log.warning("search rejected the start span: %s", e)
        res = {"success": False, "reason": "start_infeasible", "expansions": 0}
    rbk_time = time.perf_counter() - t_start
    if not res["success"]:
        _emit(state, events, "replan_failed", trigger=trigger.kind, reason=res["reason"],
              rbk_time=rbk_time, expansions=res["expansions"])
        return False
    state.points = np.vstack([state.points[:state.commit_end], res["points"][k:]])
    _emit(state, events, "replan", trigger=trigger.kind, rbk_time=rbk_time,
          expansions=res["expansions"], cost=res["cost"], points=len(res["points"]) - k,
          step_closing=res["step_closing"])
    return True


def _optimize(state: PlanState, events: List[Dict]) -> None:
    """One elastic pass over the optimizing window, then the safety refinement."""
    spec, world = state.spec, state.world
    k, n = spec.k, len(state.points)
    first = state.commit_end - 1                     # last committed point, pinned
    last = min(state.commit_end + state.window, n - k)
    if last - first < 2:
        return
    params = state.config.tube_params(world.resolution)
    try:
        res = run_elastic_optimization(spec, state.points, first, last, world, params)
    except ValueError as e:
        log.warning("elastic pass skipped: %s", e)
        return
    pts = res["points"]
    inserted = 0
    try:
        safe = enforce_safety(spec, pts, res["tube"], world, world.delta_r,
                              first_mutable=state.commit_end)
        inserted = len(safe) - len(pts)
        pts = safe
    except RuntimeError as e:
        log.warning("safety refinement failed, keeping the search output: %s", e)
        pts = state.points
    state.points = pts
    _emit(state, events, "opt", tube_time=res["tube_time"], opt_time=res["opt_time"],
          objective=res["objective"], initial_objective=res["initial_objective"],
          violation=res["violation"], flagged=res["flagged"], inserted=inserted)


def init_plan(global_goal, world: OccupancyWorld, config: PlannerConfig,
              start: Sequence[float], t0: float = 0.0) -> PlanState:
    """Hover at start, search toward the first local target, refine once.

    global_goal is one point or a sequence of points visited in order.
    """
    goals = np.atleast_2d(np.asarray(global_goal, dtype=float))
    start = np.asarray(start, dtype=float)
    if not world.is_free(start, "elas"):
        raise ValueError(f"Start {start} is not free at the c_elas level")
    ok, margins = check_two_level_inflation(world.resolution, config.connectivity,
                                            world.clearances.c_rbk, world.clearances.c_elas,
                                            world.delta_r)
    if not ok:
        log.warning("two-level inflation condition fails: %s", margins)
    k = config.spec.k
    state = PlanState(points=np.repeat(start[None, :], k, axis=0), config=config, world=world,
                      goals=[g for g in goals], t0=t0, clock=t0, commit_end=k,
                      leg_origin=start.copy())
    events: List[Dict] = []
    if not _replan(state, ReplanTrigger("goal-moved", "init"), events):
        raise RuntimeError(f"Initial search failed: {events[-1]['detail']}")
    _optimize(state, events)
    return state


def _pad_hover(state: PlanState, s: int) -> None:
    need = s + state.spec.k + 1 - len(state.points)
    if need > 0:
        tail = np.repeat(state.points[-1:], need, axis=0)
        state.points = np.vstack([state.points, tail])


def _leg_finished(state: PlanState, s: int) -> bool:
    k = state.spec.k
    tail = state.points[-k:]
    return s >= len(state.points) - k - 1 and bool(np.all(tail == tail[0]))


def _settled(state: PlanState) -> bool:
    """Nothing left to move: the plan hovers from the last committed point on."""
    rest = state.points[state.commit_end - 1:]
    return bool(np.all(rest == rest[-1]))


def detect_trigger(state: PlanState, s: int) -> Optional[ReplanTrigger]:
    """Mutable-region collision, goal drawing near, or the active-mode timer."""
    spec, world = state.spec, state.world
    k, n = spec.k, len(state.points)
    bad = colliding_spans(spec, state.points, world, world.delta_r,
                          state.commit_end - k + 1, n - k)
    if bad:
        return ReplanTrigger("collision-detected", bad[0])
    if state.commit_end < n:
        clear = world.clearance(state.points[state.commit_end:])
        close = np.flatnonzero(clear < world.clearances.c_elas - POINT_CLEARANCE_TOL)
        if len(close):
            return ReplanTrigger("collision-detected", int(state.commit_end + close[0]))
    if not state.target_is_goal and state.local_target is not None:
        if np.linalg.norm(state.position() - state.local_target) < state.config.sensing_range / 2:
            return ReplanTrigger("goal-moved", "retarget")
    if (state.mode == "active" and s - state.last_timer_span >= state.config.timer_period
            and not (state.target_is_goal and _settled(state))):
        return ReplanTrigger("timer", s - state.last_timer_span)
    return None


def step(state: PlanState, world: OccupancyWorld, dt_sim: float) -> Tuple[PlanState, List[Dict]]:
    """Advance the clock by dt_sim against a fresh world snapshot.

    The state is updated in place and returned with the events of this step.
    """
    if not dt_sim > 0:
        raise ValueError(f"Invalid dt_sim={dt_sim}: must be > 0")
    events: List[Dict] = []
    if state.halted or state.done:
        return state, events
    spec = state.spec
    k = spec.k
    state.world = world
    state.clock += dt_sim
    s = state.current_span()
    _pad_hover(state, s)
    n = len(state.points)

    state.executed_end = min(s, n)
    prev_commit = state.commit_end
    state.commit_end = max(state.commit_end, min(n, s + k + 1))
    if state.commit_end > prev_commit:
        _emit(state, events, "commit", first=prev_commit, end=state.commit_end)

    bad = colliding_spans(spec, state.points, world, world.delta_r, s, state.commit_end - k)
    if bad:
        state.halted = True
        _emit(state, events, "stop", span=bad[0], reason="committed_collision")
        return state, events

    replanned = False
    if _leg_finished(state, s):
        if state.target_is_goal:
            _emit(state, events, "goal", index=state.goal_index)
            state.goal_index += 1
            if state.goal_index >= len(state.goals):
                state.done = True
                return state, events
            state.leg_origin = state.points[-1].copy()
        replanned = _replan(state, ReplanTrigger("goal-moved", "next_leg"), events)
    else:
        trigger = detect_trigger(state, s)
        if trigger is not None:
            replanned = _replan(state, trigger, events)
            if trigger.kind == "timer":
                state.last_timer_span = s

    if replanned or state.commit_end > prev_commit:
        _optimize(state, events)
    return state, events
