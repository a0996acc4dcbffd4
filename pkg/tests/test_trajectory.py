import numpy as np
import pytest

from planner.bspline import UniformBsplineSpec
from planner.trajectory import BsplineTrajectory, sample_spans


def study():
    return UniformBsplineSpec(k=4, dt=1.0, weights={2: 1.0}, bounds={1: 2.0, 2: 3.0})


def line_points(n, h=0.5):
    pts = np.zeros((n, 3))
    pts[:, 0] = h * np.arange(n)
    return pts


def test_duration_and_span_count():
    traj = BsplineTrajectory(line_points(7), study(), t0=2.0)
    assert traj.num_spans == 4
    assert traj.duration == pytest.approx(4.0)
    assert traj.end_time == pytest.approx(6.0)


def test_linear_points_give_constant_velocity():
    traj = BsplineTrajectory(line_points(7), study(), t0=2.0)
    for t in (2.0, 3.3, 5.9, 6.0):
        assert np.allclose(traj.evaluate(t, 1), [0.5, 0, 0])
        assert np.allclose(traj.evaluate(t, 2), 0.0)
    assert np.allclose(traj.evaluate(2.0), [0.5, 0, 0])
    assert traj.length() == pytest.approx(2.0)
    assert np.allclose(traj.max_abs_derivative(1), [0.5, 0, 0])


def test_sample_matches_evaluate():
    rng = np.random.default_rng(2)
    traj = BsplineTrajectory(rng.uniform(-1, 1, size=(8, 3)), study())
    samples = traj.sample(0.25)
    assert len(samples["t"]) == 21
    for i in (0, 7, 20):
        t = samples["t"][i]
        for l in (0, 1, 2):
            assert np.allclose(samples[l][i], traj.evaluate(t, l))


def test_horizon_truncates_and_rejects_later_times():
    traj = BsplineTrajectory(line_points(7), study(), horizon=2.0)
    assert len(traj.sample(0.5)["t"]) == 5
    with pytest.raises(ValueError):
        traj.evaluate(2.5)
    with pytest.raises(ValueError):
        traj.evaluate(-0.1)


def test_bad_inputs():
    with pytest.raises(ValueError):
        BsplineTrajectory(line_points(3), study())
    traj = BsplineTrajectory(line_points(5), study())
    with pytest.raises(ValueError):
        traj.sample(0.0)
    with pytest.raises(ValueError):
        traj.evaluate(0.5, 4)


def test_sample_spans_reports_span_indices():
    pos, idx = sample_spans(study(), line_points(7), samples_per_span=5, first_span=1, last_span=2)
    assert pos.shape == (10, 3)
    assert list(idx) == [1] * 5 + [2] * 5
    pos, idx = sample_spans(study(), line_points(7), first_span=5)
    assert len(pos) == 0 and len(idx) == 0
