"""Elastic-tube back end: free-space bubbles, QCQP refinement, safety pass.

  1. elastic_tube pushes a bubble away from the nearest obstacle for every
     control point, keeping the grown bubble around the original one
  2. solve_placement_qcqp moves the window's control points inside their
     bubbles to minimize the spline control cost, subject to the same
     linear derivative bounds as the search (convex: cvxpy SOCP)
  3. enforce_safety duplicates control points where the curve strays from
     its polyline into the robot-radius margin

The optimization never makes things worse: the initial placement is
feasible, and any solver output that is not verifiably feasible and
cheaper is pulled back toward it by a line search.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np

from planner.bspline import (
    UniformBsplineSpec,
    combined_hessian,
    refine_candidates,
    saturate,
    span_polyline_deviation,
    spans_cost,
    spans_feasible,
    tables_for,
    trajectory_spans,
)
from planner.env_map import OccupancyWorld, d_max_for, nn_search
from planner.trajectory import sample_spans

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-6
OBJECTIVE_TOL = 1e-9
BOUND_MARGIN = 1e-7                # derivative bounds are tightened by this inside the solver
SAFETY_SAMPLES = 20                 # curve samples per span (dt/20)
POLYLINE_STEP = 0.02                # meters between polyline samples
LINE_SEARCH_STEPS = 20


@dataclass(frozen=True)
class TubeParams:
    d_thres: float                  # containment slack
    d_tol: float                    # bisection stops below this interval
    d_min: float = 0.0
    d_max: float = 1.0
    radius_cap: float = 4.0         # sensing range

    @classmethod
    def for_resolution(cls, resolution: float, **overrides) -> "TubeParams":
        params = {"d_thres": resolution / 2.0, "d_tol": resolution}
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class ElasticTube:
    centers: np.ndarray
    radii: np.ndarray
    sources: np.ndarray
    source_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.radii)


def _fallback_direction(placement: np.ndarray, i: int) -> Optional[np.ndarray]:
    """Away from the centroid of the adjacent placement points."""
    adj = [placement[j] for j in (i - 1, i + 1) if 0 <= j < len(placement)]
    if not adj:
        return None
    v = placement[i] - np.mean(adj, axis=0)
    n = float(np.linalg.norm(v))
    return v / n if n > 1e-12 else None


def _bubble_radius(world: OccupancyWorld, q: np.ndarray, cap: float) -> float:
    _, dist = nn_search(world, q)
    return min(dist - world.clearances.c_elas, cap)


def elastic_tube(placement: np.ndarray, world: OccupancyWorld, params: TubeParams) -> ElasticTube:
    """Grow one bubble per control point away from its nearest obstacle.

    The push distance d is bisected on [d_min, d_max]; a push is accepted
    while the new bubble still contains the original one (within d_thres).
    """
    placement = np.asarray(placement, dtype=float)
    cap = params.radius_cap
    centers = np.zeros_like(placement)
    radii = np.zeros(len(placement))
    src_radii = np.zeros(len(placement))

    for i, p in enumerate(placement):
        n, dist = nn_search(world, p)
        if n is None:
            f = _fallback_direction(placement, i)
            centers[i] = p if f is None else p + params.d_max * f
            radii[i] = cap
            src_radii[i] = max(cap - float(np.linalg.norm(centers[i] - p)), 0.0)
            continue
        r = min(dist - world.clearances.c_elas, cap)
        if r <= 0:
            raise ValueError(f"Control point {i} at {p} is inside the c_elas inflation "
                             f"(obstacle distance {dist:.4f})")
        src_radii[i] = r
        if dist > 1e-12:
            f = (p - n) / dist
        else:
            f = _fallback_direction(placement, i)
        if f is None:
            log.debug("no push direction for point %d, keeping bubble in place", i)
            centers[i], radii[i] = p, r
            continue

        def accepts(d: float) -> bool:
            return abs(_bubble_radius(world, p + d * f, cap) - d - r) <= params.d_thres

        lo, hi = params.d_min, params.d_max
        if accepts(hi):
            best = hi
        else:
            best = lo
            while hi - lo > params.d_tol:
                mid = 0.5 * (lo + hi)
                if accepts(mid):
                    lo = best = mid
                else:
                    hi = mid
        q = p + best * f
        rq = _bubble_radius(world, q, cap)
        if rq < float(np.linalg.norm(q - p)):
            q, rq = p, max(r, 1e-6)
        centers[i], radii[i] = q, rq

    return ElasticTube(centers, radii, placement.copy(), src_radii)


def tube_contains_sources(tube: ElasticTube, d_thres: float = 0.0) -> bool:
    """Every bubble holds its source point, and the source bubble within d_thres."""
    gap = np.linalg.norm(tube.centers - tube.sources, axis=1)
    holds_point = np.all(gap <= tube.radii + 1e-9)
    holds_ball = np.all(gap + tube.source_radii <= tube.radii + d_thres + 1e-9)
    return bool(holds_point and holds_ball and np.all(tube.radii > 0))


# ---------------------------------------------------------------------------
# Placement QCQP
# ---------------------------------------------------------------------------

@dataclass
class PlacementQCQP:
    """Variables x_0..x_m with fixed context before/after forming hybrid spans."""
    spec: UniformBsplineSpec
    initial: np.ndarray                 # (m+1, 3), also the warm start
    before: np.ndarray                  # up to k-1 fixed points
    after: np.ndarray                   # up to k-1 fixed points
    centers: np.ndarray                 # bubble per variable (ends unused)
    radii: np.ndarray

    @property
    def m(self) -> int:
        return self.initial.shape[0] - 1

    def sequence(self, x: np.ndarray) -> np.ndarray:
        return np.vstack([self.before, x, self.after])

    def objective(self, x: np.ndarray) -> float:
        return float(np.sum(spans_cost(self.spec, trajectory_spans(self.sequence(x), self.spec.k))))

    def violation(self, x: np.ndarray) -> float:
        """Largest violation over ball, bound and endpoint constraints."""
        worst = 0.0
        if self.m >= 2:
            inner = slice(1, self.m)
            gap = np.linalg.norm(x[inner] - self.centers[inner], axis=1) - self.radii[inner]
            worst = max(worst, float(np.max(gap)))
        spans = trajectory_spans(self.sequence(x), self.spec.k)
        tab = tables_for(self.spec)
        for l in self.spec.bounds:
            ctrl = np.abs(np.einsum("ij,njd->nid", tab.S[l], spans))
            worst = max(worst, float(np.max(ctrl - self.spec.bound_array(l)[None, None, :])))
        worst = max(worst, float(np.max(np.abs(x[0] - self.initial[0]))),
                    float(np.max(np.abs(x[-1] - self.initial[-1]))))
        return worst


def build_window_problem(spec: UniformBsplineSpec, points: np.ndarray, first: int, last: int,
                         tube: ElasticTube) -> PlacementQCQP:
    """Variables are points[first..last] inclusive; tube is aligned with them."""
    points = np.asarray(points, dtype=float)
    k = spec.k
    if not 0 <= first < last < len(points):
        raise ValueError(f"Invalid window [{first}, {last}] for {len(points)} points")
    if len(tube) != last - first + 1:
        raise ValueError(f"Tube holds {len(tube)} bubbles for {last - first + 1} variables")
    return PlacementQCQP(
        spec=spec,
        initial=points[first:last + 1].copy(),
        before=points[max(0, first - (k - 1)):first].copy(),
        after=points[last + 1:last + k].copy(),
        centers=tube.centers,
        radii=tube.radii,
    )


def _half_hessian(spec: UniformBsplineSpec) -> np.ndarray:
    """L with L^T L = H (eigenvalues clipped at zero)."""
    w, u = np.linalg.eigh(combined_hessian(spec))
    return np.sqrt(np.clip(w, 0.0, None))[:, None] * u.T


def solve_placement_qcqp(problem: PlacementQCQP, initial: Optional[np.ndarray] = None) -> Dict:
    """Minimize the window's control cost inside the bubbles.

    Returns points, objective, initial_objective, status and a `flagged`
    marker when the solver output had to be repaired or discarded.
    """
    spec, k = problem.spec, problem.spec.k
    x0 = problem.initial if initial is None else np.asarray(initial, dtype=float)
    viol0 = problem.violation(x0)
    if viol0 > CONSTRAINT_TOL:
        raise ValueError(f"Initial placement violates the program by {viol0:.3g}")
    obj0 = problem.objective(x0)
    m = problem.m
    if m < 2:
        return {"points": x0.copy(), "objective": obj0, "initial_objective": obj0,
                "status": "trivial", "flagged": False}

    n_before = len(problem.before)
    seq_const = problem.sequence(np.zeros_like(x0))
    n_seq = seq_const.shape[0]
    half = _half_hessian(spec)
    tab = tables_for(spec)

    X = cp.Variable((m + 1, 3))
    cost = 0
    constraints = [X[0] == x0[0], X[m] == x0[m]]
    for j in range(n_seq - k + 1):
        sel = np.zeros((k, m + 1))
        for r in range(k):
            idx = j + r - n_before
            if 0 <= idx <= m:
                sel[r, idx] = 1.0
        const = seq_const[j:j + k]
        span = const + sel @ X
        cost += cp.sum_squares(half @ span)
        for l in spec.bounds:
            bound = np.tile(spec.bound_array(l) - BOUND_MARGIN, (k, 1))
            expr = tab.S[l] @ span
            constraints += [expr <= bound, expr >= -bound]
    for i in range(1, m):
        constraints.append(cp.norm(X[i] - problem.centers[i]) <= problem.radii[i])

    prob = cp.Problem(cp.Minimize(cost), constraints)
    X.value = x0
    try:
        prob.solve()
        status = prob.status
    except cp.error.SolverError as e:
        log.warning("placement solver failed: %s", e)
        status = "solver_error"

    if X.value is None:
        return {"points": x0.copy(), "objective": obj0, "initial_objective": obj0,
                "status": status, "flagged": True}

    x = np.array(X.value)
    x[0], x[m] = x0[0], x0[m]
    flagged = status != cp.OPTIMAL
    if not _acceptable(problem, x) or problem.objective(x) > obj0 + OBJECTIVE_TOL:
        x, flagged = _line_search(problem, x0, x, obj0), True
    return {"points": x, "objective": problem.objective(x), "initial_objective": obj0,
            "status": status, "flagged": flagged}


def _acceptable(problem: PlacementQCQP, x: np.ndarray) -> bool:
    """Within tolerance of every constraint, and strictly inside the derivative bounds."""
    if problem.violation(x) > CONSTRAINT_TOL:
        return False
    return bool(np.all(spans_feasible(problem.spec, trajectory_spans(problem.sequence(x), problem.spec.k))))


def _line_search(problem: PlacementQCQP, x0: np.ndarray, x1: np.ndarray, obj0: float) -> np.ndarray:
    """Best point on the segment x0 -> x1 that is feasible and no worse than x0."""
    best, best_obj = x0.copy(), obj0
    alpha = 1.0
    for _ in range(LINE_SEARCH_STEPS):
        x = x0 + alpha * (x1 - x0)
        x[0], x[-1] = x0[0], x0[-1]
        if _acceptable(problem, x):
            obj = problem.objective(x)
            if obj < best_obj:
                best, best_obj = x, obj
        alpha *= 0.5
    log.debug("line search kept objective %.6g (initial %.6g)", best_obj, obj0)
    return best


# ---------------------------------------------------------------------------
# Inflation condition and safety
# ---------------------------------------------------------------------------

def check_two_level_inflation(resolution: float, connectivity: int, c_rbk: float,
                              c_elas: float, delta_r: float) -> Tuple[bool, Dict[str, float]]:
    """Sufficient clearances for bubble overlap and polyline safety."""
    d_max = d_max_for(resolution, connectivity)
    margins = {
        "d_max": d_max,
        "tube": 2.0 * (c_rbk - c_elas) - d_max,
        "polyline": (c_elas - delta_r) - (np.sqrt(2.0) - 1.0) / 2.0 * d_max,
    }
    return margins["tube"] > 0 and margins["polyline"] > 0, margins


def _polyline_clearance(world: OccupancyWorld, poly: np.ndarray) -> float:
    samples = [poly[:1]]
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / POLYLINE_STEP)) + 1)
        samples.append(a + np.linspace(0.0, 1.0, n)[:, None] * (b - a))
    return float(np.min(world.clearance(np.vstack(samples))))


def colliding_spans(spec: UniformBsplineSpec, points: np.ndarray, world: OccupancyWorld,
                    delta_r: float, first_span: int = 0, last_span: Optional[int] = None,
                    samples_per_span: int = SAFETY_SAMPLES) -> List[int]:
    pos, idx = sample_spans(spec, points, samples_per_span, first_span, last_span)
    if not len(pos):
        return []
    hit = world.clearance(pos) <= delta_r
    return sorted({int(j) for j in idx[hit]})


def enforce_safety(spec: UniformBsplineSpec, placement: np.ndarray, tube: Optional[ElasticTube],
                   world: OccupancyWorld, delta_r: float, first_mutable: int = 0,
                   samples_per_span: int = SAFETY_SAMPLES) -> np.ndarray:
    """Duplicate control points locally until every sampled clearance exceeds delta_r.

    Only points at index >= first_mutable are duplicated. A colliding span
    whose own control polyline collides cannot be fixed this way and raises.
    """
    pts = np.asarray(placement, dtype=float)
    first_span = max(0, first_mutable - spec.k + 1)
    max_rounds = (len(pts) + 1) * spec.k * spec.k
    for _ in range(max_rounds):
        bad = colliding_spans(spec, pts, world, delta_r, first_span, None, samples_per_span)
        if not bad:
            return pts
        j = bad[0]
        span = pts[j:j + spec.k]
        clear = _polyline_clearance(world, span)
        if clear <= delta_r:
            raise RuntimeError(f"Control polyline of span {j} collides (clearance {clear:.4f} "
                               f"<= {delta_r}); inflation precondition violated")
        if tube is not None:
            log.debug("span %d leaves the polyline; tube radii near it: %s", j,
                      np.round(tube.radii[max(0, j - first_mutable):j - first_mutable + spec.k], 3))
        pts = _refine_span(spec, pts, j, first_mutable)
    raise RuntimeError(f"Safety refinement did not converge after {max_rounds} rounds")


def _refine_span(spec: UniformBsplineSpec, pts: np.ndarray, j: int, first: int) -> np.ndarray:
    """One duplication in span j, preferring variants that keep the bounds."""
    cands = refine_candidates(spec, pts, j, first)
    if not cands:
        log.warning("span %d saturated but still colliding; saturating the mutable tail", j)
        return saturate(spec, pts, first)

    def score(c: np.ndarray) -> Tuple[int, float]:
        lo = max(0, j - spec.k)
        hi = j + 2 * spec.k
        local = c[lo:hi + 1]
        feasible = bool(np.all(spans_feasible(spec, trajectory_spans(local, spec.k))))
        return (0 if feasible else 1), float(np.max(span_polyline_deviation(spec, local)))

    scored = sorted(((score(c), i) for i, c in enumerate(cands)))
    if scored[0][0][0] == 1:
        log.warning("safety duplication in span %d breaks derivative bounds", j)
    return cands[scored[0][1]]


def run_elastic_optimization(spec: UniformBsplineSpec, points: np.ndarray, first: int, last: int,
                             world: OccupancyWorld, params: TubeParams) -> Dict:
    """Tube expansion plus QCQP on points[first..last], with component timings."""
    t0 = time.perf_counter()
    tube = elastic_tube(points[first:last + 1], world, params)
    t1 = time.perf_counter()
    problem = build_window_problem(spec, points, first, last, tube)
    sol = solve_placement_qcqp(problem)
    t2 = time.perf_counter()
    out = np.array(points, dtype=float)
    out[first:last + 1] = sol["points"]
    return {
        "points": out,
        "tube": tube,
        "objective": sol["objective"],
        "initial_objective": sol["initial_objective"],
        "status": sol["status"],
        "flagged": sol["flagged"],
        "violation": problem.violation(sol["points"]),
        "tube_time": t1 - t0,
        "opt_time": t2 - t1,
    }
