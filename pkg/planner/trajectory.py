"""Evaluable B-spline trajectory over a whole control-point sequence.

Span j covers times [t0 + j*dt, t0 + (j+1)*dt] and uses points j..j+k-1.
Used by the replanner's committed-trajectory handle, the collision checks
and the trajectory exporter.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from planner.bspline import UniformBsplineSpec, tables_for, trajectory_spans

TIME_TOL = 1e-9


class BsplineTrajectory:
    def __init__(self, points: np.ndarray, spec: UniformBsplineSpec, t0: float = 0.0,
                 horizon: Optional[float] = None):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < spec.k:
            raise ValueError(f"Trajectory needs at least k={spec.k} points, got shape {pts.shape}")
        pts.flags.writeable = False
        self.points = pts
        self.spec = spec
        self.t0 = float(t0)
        self.num_spans = pts.shape[0] - spec.k + 1
        self.end_time = self.t0 + self.num_spans * spec.dt
        self.horizon = self.end_time if horizon is None else min(float(horizon), self.end_time)

    @property
    def duration(self) -> float:
        return self.end_time - self.t0

    def locate(self, t: float) -> Tuple[int, float]:
        """Span index and normalized parameter for time t."""
        if t < self.t0 - TIME_TOL or t > self.horizon + TIME_TOL:
            raise ValueError(f"Time {t:.6f} outside trajectory horizon "
                             f"[{self.t0:.6f}, {self.horizon:.6f}]")
        s = (t - self.t0) / self.spec.dt
        j = int(np.clip(np.floor(s), 0, self.num_spans - 1))
        return j, float(np.clip(s - j, 0.0, 1.0))

    def evaluate(self, t: float, l: int = 0) -> np.ndarray:
        if not 0 <= l <= self.spec.k - 1:
            raise ValueError(f"Invalid derivative order l={l} for k={self.spec.k}")
        j, u = self.locate(t)
        tab = tables_for(self.spec)
        span = self.points[j:j + self.spec.k]
        return (tab.power_basis(np.array([u]), l) @ tab.M @ span)[0] / self.spec.dt ** l

    def sample(self, step: float, max_order: int = 2) -> Dict[str, np.ndarray]:
        """Uniform time samples up to the horizon: t plus one array per order."""
        if not step > 0:
            raise ValueError(f"Invalid sample step={step}: must be > 0")
        n = int(np.floor((self.horizon - self.t0) / step + TIME_TOL)) + 1
        times = self.t0 + step * np.arange(n)
        out = {"t": times}
        spans = np.clip(np.floor((times - self.t0) / self.spec.dt).astype(int), 0, self.num_spans - 1)
        us = np.clip((times - self.t0) / self.spec.dt - spans, 0.0, 1.0)
        tab = tables_for(self.spec)
        for l in range(max_order + 1):
            rows = tab.power_basis(us, l) @ tab.M        # (n, k)
            idx = spans[:, None] + np.arange(self.spec.k)[None, :]
            out[l] = np.einsum("nk,nkd->nd", rows, self.points[idx]) / self.spec.dt ** l
        return out

    def dense_positions(self, samples_per_span: int = 20, first_span: int = 0,
                        last_span: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Curve points on a range of spans, returned with their span indices."""
        return sample_spans(self.spec, self.points, samples_per_span, first_span, last_span)

    def max_abs_derivative(self, l: int, samples_per_span: int = 100) -> np.ndarray:
        """Per-axis max |d^l c/dt^l| over densely sampled spans."""
        tab = tables_for(self.spec)
        basis = tab.power_basis(np.linspace(0.0, 1.0, samples_per_span), l) @ tab.M
        spans = trajectory_spans(self.points, self.spec.k)
        vals = np.einsum("sk,nkd->nsd", basis, spans) / self.spec.dt ** l
        return np.max(np.abs(vals), axis=(0, 1))

    def length(self, samples_per_span: int = 50) -> float:
        pos, _ = self.dense_positions(samples_per_span)
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))


def sample_spans(spec: UniformBsplineSpec, points: np.ndarray, samples_per_span: int = 20,
                 first_span: int = 0, last_span: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    spans = trajectory_spans(points, spec.k)
    last = spans.shape[0] - 1 if last_span is None else min(last_span, spans.shape[0] - 1)
    first = max(0, first_span)
    if last < first:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    tab = tables_for(spec)
    basis = tab.power_basis(np.linspace(0.0, 1.0, samples_per_span)) @ tab.M
    pos = np.einsum("sk,nkd->nsd", basis, spans[first:last + 1]).reshape(-1, 3)
    idx = np.repeat(np.arange(first, last + 1), samples_per_span)
    return pos, idx
