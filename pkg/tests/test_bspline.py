import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.spatial import Delaunay

from planner.bspline import (
    UniformBsplineSpec,
    basis_matrix,
    check_span_feasible,
    combined_hessian,
    evaluate,
    evaluate_many,
    get_tables,
    infeasible_spans,
    refine_toward_polyline,
    saturate,
    span_control_cost,
    span_polyline_deviation,
    spans_cost,
    spans_feasible,
    trajectory_cost,
    trajectory_spans,
)
from planner.trajectory import BsplineTrajectory, sample_spans


def study(**overrides):
    params = {"k": 4, "dt": 1.0, "weights": {2: 1.0}, "bounds": {1: 2.0, 2: 3.0}}
    params.update(overrides)
    return UniformBsplineSpec(**params)


def line_span(k, h=1.0, axis=0):
    pts = np.zeros((k, 3))
    pts[:, axis] = h * np.arange(k)
    return pts


def impulse_span(k, h=1.0):
    pts = np.zeros((k, 3))
    pts[-1, 0] = h
    return pts


def test_cubic_basis_matches_closed_form():
    expected = np.array([[1, 4, 1, 0], [-3, 0, 3, 0], [3, -6, 3, 0], [-1, 3, -3, 1]]) / 6.0
    assert np.allclose(basis_matrix(4), expected, atol=1e-15)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6, 7, 8])
def test_basis_is_partition_of_unity(k):
    m = basis_matrix(k)
    unit = np.zeros(k)
    unit[0] = 1.0
    assert np.allclose(m.sum(axis=1), unit, atol=1e-12)
    # basis functions stay non-negative on the span
    us = np.linspace(0, 1, 41)
    vals = get_tables(k, 1.0).power_basis(us) @ m
    assert np.all(vals >= -1e-12)


def test_invalid_spec_values():
    with pytest.raises(ValueError):
        UniformBsplineSpec(k=1)
    with pytest.raises(ValueError):
        UniformBsplineSpec(k=4, dt=0.0)
    with pytest.raises(ValueError):
        UniformBsplineSpec(k=4, weights={4: 1.0})
    with pytest.raises(ValueError):
        UniformBsplineSpec(k=4, weights={2: 0.0})
    with pytest.raises(ValueError):
        UniformBsplineSpec(k=4, bounds={1: (1.0, -1.0, 1.0)})


def test_default_bounds_drop_orders_the_span_cannot_carry():
    assert set(UniformBsplineSpec(k=2).bounds) == {1}
    assert set(UniformBsplineSpec(k=6).bounds) == {1, 2}


def test_tables_are_cached_and_read_only():
    t = get_tables(5, 0.15)
    assert get_tables(5, 0.15) is t
    with pytest.raises(ValueError):
        t.M[0, 0] = 2.0


def test_evaluate_reproduces_straight_line():
    spec = study(dt=0.5)
    span = line_span(4, h=0.25)
    # a cubic span over equally spaced points sits on V1 at u=0
    assert np.allclose(evaluate(spec, span, 0.0), [0.25, 0, 0])
    assert np.allclose(evaluate(spec, span, 1.0), [0.5, 0, 0])
    assert np.allclose(evaluate(spec, span, 0.3, l=1), [0.5, 0, 0])
    assert np.allclose(evaluate(spec, span, 0.7, l=2), 0.0)


def test_evaluate_rejects_bad_arguments():
    spec = study()
    with pytest.raises(ValueError):
        evaluate(spec, line_span(4), 1.5)
    with pytest.raises(ValueError):
        evaluate(spec, line_span(4), 0.5, l=4)
    with pytest.raises(ValueError):
        evaluate(spec, line_span(3), 0.5)


def test_derivatives_match_finite_differences():
    spec = UniformBsplineSpec(k=6, dt=0.15)
    rng = np.random.default_rng(3)
    span = rng.normal(size=(6, 3))
    eps = 1e-6
    for u in (0.2, 0.5, 0.8):
        for l in (1, 2, 3):
            hi = evaluate(spec, span, u + eps, l - 1)
            lo = evaluate(spec, span, u - eps, l - 1)
            fd = (hi - lo) / (2 * eps * spec.dt)
            assert np.allclose(evaluate(spec, span, u, l), fd, rtol=1e-5, atol=1e-5)


def test_impulse_cost_in_closed_form():
    # acceleration of a unit impulse is h*u/dt^2, so the cost is h^2/(3 dt^3)
    for dt in (1.0, 0.5):
        spec = study(dt=dt)
        assert span_control_cost(spec, impulse_span(4)) == pytest.approx(1.0 / (3 * dt ** 3))


def test_cost_matches_quadrature():
    spec = UniformBsplineSpec(k=6, dt=0.3, weights={2: 0.5, 4: 1.0})
    rng = np.random.default_rng(0)
    span = rng.normal(size=(6, 3))
    us = np.linspace(0.0, 1.0, 4001)
    total = 0.0
    for l, w in spec.weights.items():
        vals = np.sum(evaluate_many(spec, span, us, l) ** 2, axis=1)
        total += w * spec.dt * trapezoid(vals, us)
    assert span_control_cost(spec, span) == pytest.approx(total, rel=1e-5)


def test_static_and_linear_spans_cost_nothing():
    spec = study()
    assert span_control_cost(spec, np.ones((4, 3))) == pytest.approx(0.0, abs=1e-12)
    assert span_control_cost(spec, line_span(4)) == pytest.approx(0.0, abs=1e-12)


def test_combined_hessian_is_symmetric_psd():
    h = combined_hessian(UniformBsplineSpec(k=6, dt=0.15))
    assert np.allclose(h, h.T)
    assert np.min(np.linalg.eigvalsh(h)) > -1e-12 * np.max(np.abs(h))


def test_batched_cost_and_feasibility_agree_with_single_span():
    spec = study()
    rng = np.random.default_rng(1)
    spans = rng.uniform(-1, 1, size=(50, 4, 3))
    costs = spans_cost(spec, spans)
    feas = spans_feasible(spec, spans)
    for span, c, ok in zip(spans, costs, feas):
        assert c == pytest.approx(span_control_cost(spec, span))
        assert ok == check_span_feasible(spec, span)[0]


def test_constant_velocity_is_feasible_up_to_the_bound():
    spec = study()
    ok, margins = check_span_feasible(spec, line_span(4, h=2.0))
    assert ok
    assert margins[1] == pytest.approx(0.0, abs=1e-12)
    ok, _ = check_span_feasible(spec, line_span(4, h=2.01))
    assert not ok


def test_static_span_margins_equal_bounds():
    spec = study()
    ok, margins = check_span_feasible(spec, np.zeros((4, 3)))
    assert ok
    assert margins == {1: 2.0, 2: 3.0}


def test_check_is_conservative_on_an_impulse():
    # curve acceleration peaks at h/dt^2, the derivative control points reach 2h/dt^2
    spec = study(bounds={2: 1.5})
    us = np.linspace(0, 1, 201)
    acc = np.abs(evaluate_many(spec, impulse_span(4), us, 2))
    assert np.max(acc) == pytest.approx(1.0)
    ok, margins = check_span_feasible(spec, impulse_span(4))
    assert not ok
    assert margins[2] == pytest.approx(-0.5)


def test_reversal_needs_four_times_the_step():
    spec = study()
    span = np.zeros((4, 3))
    span[:, 0] = [0.0, 1.0, 2.0, 1.0]
    ok, margins = check_span_feasible(spec, span)
    assert not ok
    assert margins[2] == pytest.approx(3.0 - 4.0)


def test_feasibility_check_is_sound_on_random_spans():
    spec = study()
    rng = np.random.default_rng(7)
    us = np.linspace(0, 1, 101)
    accepted = 0
    for _ in range(1000):
        span = rng.uniform(-0.6, 0.6, size=(4, 3))
        if not check_span_feasible(spec, span)[0]:
            continue
        accepted += 1
        for l in (1, 2):
            vals = np.abs(evaluate_many(spec, span, us, l))
            assert np.all(vals <= spec.bound_array(l) + 1e-9)
    assert accepted > 100


def test_trajectory_cost_adds_time_per_span():
    spec = study()
    pts = np.vstack([np.zeros((4, 3)), impulse_span(4)[-1:]])
    cost = trajectory_cost(spec, pts, lam=2.0)
    assert cost["time_cost"] == pytest.approx(2.0 * 2)
    assert cost["control_cost"] == pytest.approx(1.0 / 3.0)
    assert cost["cost"] == pytest.approx(4.0 + 1.0 / 3.0)


def test_infeasible_spans_lists_offenders():
    spec = study()
    pts = np.zeros((6, 3))
    pts[:, 0] = [0, 1, 2, 3, 2, 1]
    assert trajectory_spans(pts, 4).shape == (3, 4, 3)
    bad = infeasible_spans(spec, pts)
    assert bad and 0 not in bad


def test_saturate_leaves_runs_before_first_alone():
    spec = study()
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    out = saturate(spec, pts, first=2)
    assert np.array_equal(out[:2], pts[:2])
    assert len(out) == 2 + 2 * 3


def test_refine_toward_polyline_reaches_tolerance():
    spec = study()
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0], [2, 2, 0], [3, 2, 0], [4, 2, 0]],
                   dtype=float)
    tol = 0.02
    out = refine_toward_polyline(spec, pts, tol)
    assert np.max(span_polyline_deviation(spec, out)) <= tol + 1e-9
    # only duplications: the distinct points keep their order
    keep = [0] + [i for i in range(1, len(out)) if not np.array_equal(out[i], out[i - 1])]
    assert np.array_equal(out[keep], pts)
    with pytest.raises(ValueError):
        refine_toward_polyline(spec, pts, 0.0)


def test_curve_stays_in_the_convex_hull_of_its_span():
    spec = UniformBsplineSpec(k=6, dt=0.15)
    rng = np.random.default_rng(11)
    us = np.linspace(0.0, 1.0, 51)
    for _ in range(20):
        span = rng.normal(size=(6, 3))
        hull = Delaunay(span)
        assert np.all(hull.find_simplex(evaluate_many(spec, span, us), tol=1e-9) >= 0)


def test_moving_one_point_only_changes_k_spans():
    spec = UniformBsplineSpec(k=6, dt=0.15)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(14, 3))
    moved = pts.copy()
    moved[7] += [0.5, -0.3, 0.2]
    before, span_idx = sample_spans(spec, pts)
    after, _ = sample_spans(spec, moved)
    changed = np.any(np.abs(after - before) > 1e-12, axis=1)
    touched = (span_idx >= 7 - spec.k + 1) & (span_idx <= 7)
    assert not np.any(changed & ~touched)
    assert set(span_idx[changed]) == set(range(2, 8))


@pytest.mark.parametrize("k", [3, 4, 6])
def test_k_minus_one_copies_pin_the_curve(k):
    spec = UniformBsplineSpec(k=k, dt=0.5)
    rng = np.random.default_rng(k)
    p = np.array([1.0, -2.0, 0.5])
    pts = np.vstack([rng.normal(size=(3, 3)), np.repeat(p[None, :], k - 1, axis=0),
                     rng.normal(size=(3, 3))])
    traj = BsplineTrajectory(pts, spec)
    # the run starts at index 3, so span 3 opens on it
    assert np.linalg.norm(traj.evaluate(3 * spec.dt) - p) < 1e-9
    assert np.linalg.norm(evaluate(spec, pts[2:2 + k], 1.0) - p) < 1e-9


def test_tighter_refinement_never_raises_the_deviation():
    spec = study()
    rng = np.random.default_rng(2)
    for _ in range(5):
        pts = np.cumsum(rng.uniform(-0.5, 0.5, size=(8, 3)), axis=0)
        worst = [float(np.max(span_polyline_deviation(spec, pts)))]
        for tol in (0.2, 0.1, 0.05, 0.02, 0.01):
            out = refine_toward_polyline(spec, pts, tol)
            worst.append(float(np.max(span_polyline_deviation(spec, out))))
        assert all(b <= a + 1e-12 for a, b in zip(worst, worst[1:]))
        assert worst[-1] <= 0.01 + 1e-9
