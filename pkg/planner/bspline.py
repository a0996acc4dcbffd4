"""Uniform B-spline mathematics shared by the search, optimizer and replanner.

A span is k consecutive control points V (k x 3). Its curve segment on the
normalized parameter u in [0, 1] is

    c(u) = b(u)^T . M_k . V,   b(u) = [1, u, ..., u^(k-1)]

and every quantity here (derivatives, control cost, feasibility) is a
constant matrix applied to V:
  - M_k is fitted exactly (rational arithmetic) against the De Boor-Cox
    recursion, not taken from a printed closed form
  - C_l maps b to its l-th derivative, Q_l integrates squared derivatives
  - S_l = M^-1 C_l^T M / dt^l turns V into the control points of the l-th
    derivative curve; bounding them bounds the derivative (convex hull)
  - refine_toward_polyline duplicates control points until the curve hugs
    its control polyline
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DEFAULT_K = 6
DEFAULT_DT = 0.15
DEFAULT_BOUNDS = {1: (2.0, 2.0, 2.0), 2: (3.0, 3.0, 3.0)}

FEAS_TOL = 1e-9            # slack on |S v| <= u_max
DEVIATION_SAMPLES = 20     # curve samples per span for polyline deviation


def default_weights(k: int) -> Dict[int, float]:
    """Snap-only cost for k >= 6, otherwise the highest order the span carries."""
    if k >= 6:
        return {4: 1.0}
    return {max(1, k - 2): 1.0}


@dataclass(frozen=True)
class UniformBsplineSpec:
    k: int = DEFAULT_K
    dt: float = DEFAULT_DT
    weights: Optional[Dict[int, float]] = None
    bounds: Optional[Dict[int, Tuple[float, float, float]]] = None

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 2:
            raise ValueError(f"Invalid span size k={self.k}: must be an integer >= 2")
        if not self.dt > 0:
            raise ValueError(f"Invalid knot step dt={self.dt}: must be > 0")

        weights = default_weights(self.k) if self.weights is None else self.weights
        weights = {int(l): float(w) for l, w in weights.items()}
        for l, w in weights.items():
            if not 1 <= l <= self.k - 1:
                raise ValueError(f"Invalid weight order {l} for k={self.k}")
            if w < 0:
                raise ValueError(f"Invalid weight w_{l}={w}: must be >= 0")
        if not any(w > 0 for w in weights.values()):
            raise ValueError("At least one cost weight must be positive")

        if self.bounds is None:
            bounds = {l: b for l, b in DEFAULT_BOUNDS.items() if l <= self.k - 1}
        else:
            bounds = {}
            for l, b in self.bounds.items():
                b = (float(b),) * 3 if np.isscalar(b) else tuple(float(x) for x in b)
                if len(b) != 3:
                    raise ValueError(f"Bound for order {l} needs 3 axes, got {b}")
                if not 1 <= int(l) <= self.k - 1:
                    raise ValueError(f"Invalid bound order {l} for k={self.k}")
                if any(x <= 0 for x in b):
                    raise ValueError(f"Invalid bound for order {l}: {b} (must be > 0)")
                bounds[int(l)] = b

        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bounds", bounds)

    def bound_array(self, l: int) -> np.ndarray:
        return np.asarray(self.bounds[l], dtype=float)


@dataclass(frozen=True)
class Span:
    points: np.ndarray
    start_knot_index: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"Span points must be (k, 3), got shape {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]


SpanLike = Union[Span, np.ndarray, Sequence[Sequence[float]]]


def _span_points(spec: UniformBsplineSpec, span: SpanLike) -> np.ndarray:
    pts = span.points if isinstance(span, Span) else np.asarray(span, dtype=float)
    if pts.shape != (spec.k, 3):
        raise ValueError(f"Span must hold k={spec.k} points of 3 coordinates, got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Basis tables
# ---------------------------------------------------------------------------

def _cardinal_bspline(degree: int, t: Fraction) -> Fraction:
    """De Boor-Cox recursion for the uniform B-spline on knots 0..degree+1."""

    def n(i: int, q: int) -> Fraction:
        if q == 0:
            return Fraction(1) if i <= t < i + 1 else Fraction(0)
        return (t - i) / q * n(i, q - 1) + (i + q + 1 - t) / q * n(i + 1, q - 1)

    return n(0, degree)


def _solve_exact(a: List[List[Fraction]], b: List[List[Fraction]]) -> List[List[Fraction]]:
    """Gauss-Jordan elimination over the rationals: returns X with A X = B."""
    n = len(a)
    aug = [list(a[i]) + list(b[i]) for i in range(n)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        p = aug[col][col]
        aug[col] = [x / p for x in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                factor = aug[r][col]
                aug[r] = [x - factor * y for x, y in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


@lru_cache(maxsize=None)
def _basis_matrix_exact(k: int) -> Tuple[Tuple[Fraction, ...], ...]:
    degree = k - 1
    # k distinct parameters determine the degree k-1 pieces exactly
    us = [Fraction(s, max(1, k - 1)) for s in range(k)]
    vander = [[u ** i for i in range(k)] for u in us]
    # column j is the basis function of control point j restricted to [0, 1]
    values = [[_cardinal_bspline(degree, u + degree - j) for j in range(k)] for u in us]
    return tuple(tuple(row) for row in _solve_exact(vander, values))


def basis_matrix(k: int) -> np.ndarray:
    """M_k with b(u)^T M_k V equal to the De Boor-Cox evaluation of the span."""
    if int(k) != k or k < 2:
        raise ValueError(f"Invalid span size k={k}: must be an integer >= 2")
    return np.array([[float(x) for x in row] for row in _basis_matrix_exact(int(k))])


def derivative_matrix(k: int) -> np.ndarray:
    """C with d b(u)/du = C b(u), i.e. C[i, i-1] = i."""
    c = np.zeros((k, k))
    for i in range(1, k):
        c[i, i - 1] = i
    return c


def _falling(i: int, l: int) -> float:
    return factorial(i) / factorial(i - l) if i >= l else 0.0


def cost_hessian(k: int, l: int, dt: float) -> np.ndarray:
    """Q_l: integral over one span of (d^l b)(d^l b)^T, in time units."""
    q = np.zeros((k, k))
    for i in range(l, k):
        for j in range(l, k):
            q[i, j] = _falling(i, l) * _falling(j, l) / (i + j - 2 * l + 1)
    return q / dt ** (2 * l - 1)


@dataclass(frozen=True)
class BasisTables:
    k: int
    dt: float
    M: np.ndarray
    C: Dict[int, np.ndarray] = field(default_factory=dict)
    Q: Dict[int, np.ndarray] = field(default_factory=dict)
    S: Dict[int, np.ndarray] = field(default_factory=dict)

    def power_basis(self, us: np.ndarray, l: int = 0) -> np.ndarray:
        """Rows d^l b(u)/du^l for every u in us, shape (len(us), k)."""
        us = np.atleast_1d(np.asarray(us, dtype=float))
        i = np.arange(self.k)
        coef = np.array([_falling(int(x), l) for x in i])
        expo = np.clip(i - l, 0, None)
        return coef[None, :] * us[:, None] ** expo[None, :]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@lru_cache(maxsize=64)
def get_tables(k: int, dt: float) -> BasisTables:
    """Basis, derivative, cost and feasibility tables, built once per (k, dt)."""
    m = basis_matrix(k)
    m_inv = np.linalg.inv(m)
    c1 = derivative_matrix(k)
    cs, qs, ss = {}, {}, {}
    cl = np.eye(k)
    for l in range(1, k):
        cl = c1 @ cl
        cs[l] = _readonly(cl.copy())
        qs[l] = _readonly(cost_hessian(k, l, dt))
        ss[l] = _readonly(m_inv @ cl.T @ m / dt ** l)
    log.debug("built basis tables k=%d dt=%s", k, dt)
    return BasisTables(k=k, dt=dt, M=_readonly(m), C=cs, Q=qs, S=ss)


def tables_for(spec: UniformBsplineSpec) -> BasisTables:
    return get_tables(spec.k, spec.dt)


@lru_cache(maxsize=64)
def _combined_hessian(k: int, dt: float, weights: Tuple[Tuple[int, float], ...]) -> np.ndarray:
    t = get_tables(k, dt)
    h = np.zeros((k, k))
    for l, w in weights:
        if w > 0:
            h += w * (t.M.T @ t.Q[l] @ t.M)
    return _readonly(0.5 * (h + h.T))


def combined_hessian(spec: UniformBsplineSpec) -> np.ndarray:
    """H = sum_l w_l M^T Q_l M, so a span costs tr(V^T H V)."""
    return _combined_hessian(spec.k, spec.dt, tuple(sorted(spec.weights.items())))


# ---------------------------------------------------------------------------
# Span operations
# ---------------------------------------------------------------------------

def evaluate(spec: UniformBsplineSpec, span: SpanLike, u: float, l: int = 0) -> np.ndarray:
    """Position (l=0) or l-th time derivative of the span curve at parameter u."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"Invalid parameter u={u}: must lie in [0, 1]")
    if not 0 <= l <= spec.k - 1:
        raise ValueError(f"Invalid derivative order l={l} for k={spec.k}")
    return evaluate_many(spec, span, np.array([u]), l)[0]


def evaluate_many(spec: UniformBsplineSpec, span: SpanLike, us: np.ndarray, l: int = 0) -> np.ndarray:
    pts = _span_points(spec, span)
    t = tables_for(spec)
    return t.power_basis(us, l) @ t.M @ pts / spec.dt ** l


def span_control_cost(spec: UniformBsplineSpec, span: SpanLike) -> float:
    pts = _span_points(spec, span)
    return max(0.0, float(np.sum(pts * (combined_hessian(spec) @ pts))))


def check_span_feasible(spec: UniformBsplineSpec, span: SpanLike) -> Tuple[bool, Dict[int, float]]:
    """Sufficient derivative-bound test; margins are the min slack per order."""
    pts = _span_points(spec, span)
    t = tables_for(spec)
    margins: Dict[int, float] = {}
    for l in sorted(spec.bounds):
        ctrl = np.abs(t.S[l] @ pts)
        margins[l] = float(np.min(spec.bound_array(l)[None, :] - ctrl))
    ok = all(m >= -FEAS_TOL for m in margins.values())
    return ok, margins


def spans_cost(spec: UniformBsplineSpec, spans: np.ndarray) -> np.ndarray:
    """Control cost of many spans at once, spans shaped (n, k, 3)."""
    spans = np.asarray(spans, dtype=float)
    if spans.size == 0:
        return np.zeros(0)
    h = combined_hessian(spec)
    return np.clip(np.einsum("nid,ij,njd->n", spans, h, spans), 0.0, None)


def spans_feasible(spec: UniformBsplineSpec, spans: np.ndarray) -> np.ndarray:
    spans = np.asarray(spans, dtype=float)
    ok = np.ones(spans.shape[0], dtype=bool)
    if spans.size == 0:
        return ok
    t = tables_for(spec)
    for l in spec.bounds:
        ctrl = np.abs(np.einsum("ij,njd->nid", t.S[l], spans))
        ok &= np.all(ctrl <= spec.bound_array(l)[None, None, :] + FEAS_TOL, axis=(1, 2))
    return ok


# ---------------------------------------------------------------------------
# Whole control-point sequences
# ---------------------------------------------------------------------------

def trajectory_spans(points: np.ndarray, k: int) -> np.ndarray:
    """All neighboring spans of a control-point sequence, shape (n-k+1, k, 3)."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] < k:
        return np.zeros((0, k, 3))
    return sliding_window_view(points, (k, 3))[:, 0]


def trajectory_cost(spec: UniformBsplineSpec, points: np.ndarray, lam: float) -> Dict[str, float]:
    """Sum of span control costs plus lam times the curve duration."""
    spans = trajectory_spans(points, spec.k)
    control = float(np.sum(spans_cost(spec, spans)))
    time_cost = float(lam * spec.dt * spans.shape[0])
    return {"cost": control + time_cost, "control_cost": control, "time_cost": time_cost}


def infeasible_spans(spec: UniformBsplineSpec, points: np.ndarray) -> List[int]:
    ok = spans_feasible(spec, trajectory_spans(points, spec.k))
    return [int(i) for i in np.flatnonzero(~ok)]


# ---------------------------------------------------------------------------
# Refinement toward the control polyline
# ---------------------------------------------------------------------------

def point_polyline_distance(samples: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance of each sample to the polyline through poly's points."""
    samples = np.atleast_2d(samples)
    a, b = poly[:-1], poly[1:]
    if len(a) == 0:
        return np.linalg.norm(samples - poly[0], axis=1)
    ab = b - a
    denom = np.einsum("sd,sd->s", ab, ab)
    rel = samples[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0, np.einsum("nsd,sd->ns", rel, ab) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.min(np.linalg.norm(samples[:, None, :] - closest, axis=2), axis=1)


def span_polyline_deviation(spec: UniformBsplineSpec, points: np.ndarray,
                            samples_per_span: int = DEVIATION_SAMPLES) -> np.ndarray:
    """Max distance of each span's curve to that span's own control polyline."""
    t = tables_for(spec)
    basis = t.power_basis(np.linspace(0.0, 1.0, samples_per_span)) @ t.M
    spans = trajectory_spans(points, spec.k)
    dev = np.zeros(spans.shape[0])
    for j, span in enumerate(spans):
        dev[j] = np.max(point_polyline_distance(basis @ span, span))
    return dev


def _run_length(points: np.ndarray, i: int) -> int:
    """Number of consecutive copies of points[i] around index i."""
    lo = i
    while lo > 0 and np.array_equal(points[lo - 1], points[i]):
        lo -= 1
    hi = i
    while hi + 1 < len(points) and np.array_equal(points[hi + 1], points[i]):
        hi += 1
    return hi - lo + 1


def duplicate_point(points: np.ndarray, i: int) -> np.ndarray:
    return np.insert(points, i, points[i], axis=0)


def saturate(spec: UniformBsplineSpec, points: np.ndarray, first: int = 0) -> np.ndarray:
    """Repeat every point from index `first` on until each run has k-1 copies."""
    out = []
    i = 0
    while i < len(points):
        j = i + 1
        while j < len(points) and np.array_equal(points[j], points[i]):
            j += 1
        # copies are appended at the end of the run, so runs ending before
        # `first` stay untouched
        total = j - i if j <= first else max(j - i, spec.k - 1)
        out.extend([points[i]] * total)
        i = j
    return np.array(out)


def refine_candidates(spec: UniformBsplineSpec, points: np.ndarray, span_index: int,
                      first: int = 0) -> List[np.ndarray]:
    """Single-duplication variants touching one span, run length capped at k-1."""
    out = []
    lo = max(span_index, first)
    for i in range(lo, min(span_index + spec.k, len(points))):
        if i > lo and np.array_equal(points[i], points[i - 1]):
            continue  # same run as the previous candidate
        if _run_length(points, i) >= spec.k - 1:
            continue
        out.append(duplicate_point(points, i))
    return out


def refine_toward_polyline(spec: UniformBsplineSpec, points: np.ndarray, tolerance: float,
                           samples_per_span: int = DEVIATION_SAMPLES) -> np.ndarray:
    """Duplicate control points until every span stays within tolerance of its polyline.

    Each pass duplicates one point of the worst span, choosing the copy that
    leaves the lowest maximum deviation; a pass never increases it. When no
    single duplication helps, every run is saturated to k-1 copies, which puts
    each span on a straight segment of the polyline.
    """
    if not tolerance > 0:
        raise ValueError(f"Invalid tolerance={tolerance}: must be > 0")
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < spec.k:
        return pts
    dev = span_polyline_deviation(spec, pts, samples_per_span)
    max_passes = pts.shape[0] * spec.k
    for _ in range(max_passes):
        worst = float(np.max(dev))
        if worst <= tolerance:
            return pts
        best: Optional[Tuple[float, np.ndarray, np.ndarray]] = None
        for cand in refine_candidates(spec, pts, int(np.argmax(dev))):
            cdev = span_polyline_deviation(spec, cand, samples_per_span)
            score = float(np.max(cdev))
            if score <= worst and (best is None or score < best[0]):
                best = (score, cand, cdev)
        if best is None:
            log.debug("no improving duplication at deviation %.4g, saturating", worst)
            return saturate(spec, pts)
        _, pts, dev = best
    return saturate(spec, pts)
