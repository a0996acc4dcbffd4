from pathlib import Path

import numpy as np
import pytest

from bench.scenario import load_scenario
from planner.bspline import UniformBsplineSpec, evaluate, infeasible_spans, trajectory_spans
from planner.elastic import colliding_spans
from planner.env_map import AnchoredLattice, GridGraph, build_world
from planner.replanner import (
    PlannerConfig,
    ReplanTrigger,
    _leg_finished,
    committed_trajectory,
    format_event,
    init_plan,
    local_target,
    parse_event_line,
    snap_target,
    step,
)

START = np.array([0.5, 3.0, 0.0])
GOAL = np.array([4.5, 3.0, 0.0])
CLEARANCES = (0.5, 0.3, 0.1)


def make_config(**overrides):
    params = {
        "spec": UniformBsplineSpec(k=4, dt=0.5, weights={2: 1.0}, bounds={1: 2.0, 2: 3.0}),
        "window": 6,
        "sensing_range": 5.0,
        "connectivity": 8,
    }
    params.update(overrides)
    return PlannerConfig(**params)


def make_world(obstacles=()):
    obs = np.array(obstacles, dtype=float).reshape(-1, 3)
    return build_world(obs, 0.25, (24, 24), CLEARANCES)


def wall_world():
    return make_world([(3.0, y, 0.0) for y in np.arange(2.5, 3.51, 0.25)])


def fly(state, world, max_time=40.0, dt_sim=0.1, check_prefix=True):
    """Step until done/halted; asserts the committed prefix never changes."""
    events = []
    while not (state.done or state.halted) and state.clock < max_time:
        before = state.points[:state.commit_end].copy()
        _, new = step(state, world, dt_sim)
        events.extend(new)
        if check_prefix:
            assert np.array_equal(state.points[:len(before)], before)
    return events


def triggers(events, kind):
    return [e for e in events if e["event"] == "replan" and e["detail"].get("trigger") == kind]


def test_init_plan_labels():
    config = make_config()
    state = init_plan(GOAL, make_world(), config, START)
    labels = state.labels()
    assert labels[:4] == ["committed"] * 4
    assert "optimizing" in labels
    assert np.array_equal(state.points[:4], np.repeat(START[None, :], 4, axis=0))
    assert state.target_is_goal
    assert [e["event"] for e in state.events][:1] == ["replan"]


def test_empty_world_reaches_goal_without_collision_replans():
    world = make_world()
    state = init_plan(GOAL, world, make_config(), START)
    events = fly(state, world)
    assert state.done and not state.halted
    assert [e for e in events if e["event"] == "goal"]
    assert not triggers(events, "collision-detected")
    assert not triggers(events, "timer")
    assert np.allclose(state.points[-1], GOAL)
    assert infeasible_spans(state.spec, state.points) == []


def test_inserted_obstacle_triggers_replan_and_is_avoided():
    state = init_plan(GOAL, make_world(), make_config(), START)
    fly(state, make_world(), max_time=0.5)
    walled = wall_world()
    events = fly(state, walled)
    assert triggers(events, "collision-detected")
    assert state.done and not state.halted
    assert colliding_spans(state.spec, state.points, walled, walled.delta_r) == []


def test_spliced_plan_is_smooth_at_every_knot():
    state = init_plan(GOAL, make_world(), make_config(), START)
    fly(state, make_world(), max_time=0.5)
    before = committed_trajectory(state)
    events = fly(state, wall_world())
    assert triggers(events, "collision-detected")
    spec, k = state.spec, state.spec.k
    after = committed_trajectory(state)
    for l in range(k - 1):
        assert np.allclose(after.evaluate(before.horizon, l), before.evaluate(before.horizon, l),
                           atol=1e-6, rtol=0.0)
    spans = trajectory_spans(state.points, k)
    for left, right in zip(spans[:-1], spans[1:]):
        for l in range(k - 1):
            assert np.allclose(evaluate(spec, left, 1.0, l), evaluate(spec, right, 0.0, l),
                               atol=1e-6, rtol=0.0)


def test_collision_on_committed_part_halts():
    world = make_world()
    state = init_plan(GOAL, world, make_config(), START)
    fly(state, world, max_time=0.3)
    ahead = committed_trajectory(state).evaluate(state.clock + 0.15)
    _, events = step(state, make_world([ahead]), 0.1)
    assert state.halted
    assert events[-1]["event"] == "stop"
    assert events[-1]["detail"]["reason"] == "committed_collision"
    assert step(state, world, 0.1)[1] == []


def test_active_mode_replans_on_timer():
    world = make_world()
    state = init_plan(GOAL, world, make_config(mode="active", timer_knots=2), START)
    events = fly(state, world)
    assert state.done
    assert triggers(events, "timer")


def test_committed_trajectory_rejects_times_past_the_horizon():
    state = init_plan(GOAL, make_world(), make_config(), START)
    traj = committed_trajectory(state)
    assert traj.horizon <= traj.end_time
    traj.evaluate(traj.horizon)
    with pytest.raises(ValueError):
        traj.evaluate(traj.horizon + 0.1)


def test_init_plan_rejects_blocked_start():
    with pytest.raises(ValueError):
        init_plan(GOAL, make_world([START]), make_config(), START)


def test_invalid_config_and_trigger():
    with pytest.raises(ValueError):
        make_config(mode="eager")
    with pytest.raises(ValueError):
        make_config(window=0)
    with pytest.raises(ValueError):
        ReplanTrigger("whenever")
    assert make_config().timer_period == 3


def test_step_rejects_non_positive_dt():
    state = init_plan(GOAL, make_world(), make_config(), START)
    with pytest.raises(ValueError):
        step(state, make_world(), 0.0)


def test_local_target_stays_on_guide_line():
    origin = np.array([0.0, 0.0, 0.0])
    goal = np.array([10.0, 0.0, 0.0])
    target = local_target(np.array([1.0, 0.0, 0.0]), origin, goal, 4.0)
    assert np.allclose(target, [5.0, 0.0, 0.0])
    assert np.allclose(local_target(np.array([8.0, 0.0, 0.0]), origin, goal, 4.0), goal)
    off = local_target(np.array([1.0, 3.0, 0.0]), origin, goal, 4.0)
    assert np.linalg.norm(off - [1.0, 3.0, 0.0]) == pytest.approx(4.0)
    assert off[1] == pytest.approx(0.0)


def test_snap_target():
    blocked = np.array([4.0, 3.0, 0.0])
    world = make_world([blocked])
    anchor = np.array([1.0, 1.0, 0.0])
    assert np.allclose(snap_target(world, anchor, np.array([2.0, 2.0, 0.0])), [2.0, 2.0, 0.0])
    snapped = snap_target(world, anchor, blocked)
    assert world.is_free(snapped, "rbk")
    # cells exactly c_rbk away count as occupied
    assert np.linalg.norm(snapped - blocked) == pytest.approx(np.hypot(0.5, 0.25))
    assert snap_target(world, anchor, blocked, search_cells=1) is None


def test_snap_target_skips_pockets_the_lattice_cannot_reach():
    side = np.arange(3.25, 4.76, 0.25)
    ring = [(x, y, 0.0) for x in side for y in (3.25, 4.75)]
    ring += [(x, y, 0.0) for x in (3.25, 4.75) for y in side]
    world = make_world(ring)
    anchor, pocket = np.array([1.0, 1.0, 0.0]), np.array([4.0, 4.0, 0.0])
    assert np.allclose(snap_target(world, anchor, pocket), pocket)
    lattice = AnchoredLattice(GridGraph(world, 8, level="rbk"), anchor)
    snapped = snap_target(world, anchor, pocket, lattice=lattice)
    assert snapped is not None and world.is_free(snapped, "rbk")
    assert np.linalg.norm(snapped - pocket) == pytest.approx(1.5)
    assert lattice.reachable_cells(np.rint((snapped - anchor) / 0.25).astype(int))[0]


def test_leg_finishes_on_the_last_hover_span():
    state = init_plan(GOAL, make_world(), make_config(), START)
    k = state.spec.k
    state.points = np.vstack([np.linspace(START, GOAL, 6), np.repeat(GOAL[None, :], k - 1, axis=0)])
    n = len(state.points)
    assert _leg_finished(state, n - k - 1)
    assert not _leg_finished(state, n - k - 2)
    state.points[-1] = GOAL + [0.25, 0.0, 0.0]
    assert not _leg_finished(state, n - k - 1)


def test_noise_scenario_initial_search_succeeds():
    scenario = load_scenario(Path(__file__).resolve().parents[1] / "scenarios" / "noise.json")
    world = scenario.build_world()
    start = world.center(world.cell_of(np.asarray(scenario.data["start"], dtype=float)))
    state = init_plan(scenario.goals(), world, scenario.planner_config(), start)
    assert [e["event"] for e in state.events][0] == "replan"
    assert len(state.points) > state.spec.k
    assert infeasible_spans(state.spec, state.points) == []


def test_event_lines_round_trip():
    ev = {"t": 1.25, "event": "opt",
          "detail": {"tube_time": 0.0012345678901234, "opt_time": 1e-05, "flagged": False,
                     "inserted": 2, "status": "optimal"}}
    line = format_event(ev)
    assert line.startswith("t=1.250000 event=opt detail=tube_time=")
    back = parse_event_line(line)
    assert back["t"] == 1.25 and back["event"] == "opt"
    assert back["detail"] == ev["detail"]
    with pytest.raises(ValueError):
        parse_event_line("event=opt")
