"""Occupancy worlds with two inflation levels and nearest-obstacle queries.

Cell (0, 0, 0) is centered at `origin`; cell i is centered at origin + i*h.
Obstacles are a point set (pillars and noise voxels are rasterized to cell
centers). Two inflated grids are materialized at build time:
  - C^RBK  (clearance c_rbk)   used by the kinodynamic search
  - C^ELAS (clearance c_elas)  used by the elastic tube
with c_rbk > c_elas > robot radius >= 0, so occupancy is nested. A
scipy cKDTree answers exact nearest-obstacle queries for off-grid points.

2-D worlds are the same machinery with a z extent of one cell.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 1.0 / 6.0
DEFAULT_CLEARANCES = (0.4, 0.2, 0.1)       # c_rbk, c_elas, robot radius
DEFAULT_PILLAR_RADII = (0.1, 0.3)
DEFAULT_PILLAR_DENSITY = 0.25
DEFAULT_NOISE_SCALE = 8.0                  # cells per gradient-noise period
DEFAULT_NOISE_THRESHOLD = 0.7
NOISE_EPS = 1e-3
CENTER_TOL = 1e-6

LEVELS = ("raw", "elas", "rbk")


@dataclass(frozen=True)
class Clearances:
    c_rbk: float
    c_elas: float
    delta_r: float = 0.0

    def __post_init__(self):
        if not (self.c_rbk > self.c_elas > self.delta_r >= 0):
            raise ValueError(
                f"Invalid clearances: need c_rbk > c_elas > delta_r >= 0, got "
                f"c_rbk={self.c_rbk}, c_elas={self.c_elas}, delta_r={self.delta_r}")

    def level(self, name: str) -> float:
        return {"raw": 0.0, "elas": self.c_elas, "rbk": self.c_rbk}[name]


ClearanceLike = Union[Clearances, Sequence[float], Dict[str, float]]


def as_clearances(c: ClearanceLike) -> Clearances:
    if isinstance(c, Clearances):
        return c
    if isinstance(c, dict):
        return Clearances(float(c["rbk"]), float(c["elas"]), float(c.get("robot_radius", 0.0)))
    return Clearances(*[float(x) for x in c])


def cell_centers(origin: np.ndarray, resolution: float, dims: Tuple[int, int, int]) -> np.ndarray:
    """All cell centers in C order, shape (prod(dims), 3)."""
    idx = np.indices(dims).reshape(3, -1).T
    return np.asarray(origin, dtype=float)[None, :] + resolution * idx


class OccupancyWorld:
    """Immutable snapshot: obstacle points, inflated grids and a KD index."""

    def __init__(self, obstacles: np.ndarray, resolution: float, dims: Tuple[int, int, int],
                 clearances: Clearances, origin: np.ndarray):
        self.obstacles = obstacles
        self.resolution = resolution
        self.dims = dims
        self.clearances = clearances
        self.origin = origin
        self.tree: Optional[cKDTree] = cKDTree(obstacles) if len(obstacles) else None
        self.occupied: Dict[str, np.ndarray] = self._inflate()
        for grid in self.occupied.values():
            grid.flags.writeable = False

    def _inflate(self) -> Dict[str, np.ndarray]:
        raw = np.zeros(self.dims, dtype=bool)
        if self.tree is None:
            return {name: raw.copy() for name in LEVELS}
        cells = self.cells_of(self.obstacles)
        inside = self.in_bounds_cells(cells)
        raw[tuple(cells[inside].T)] = True
        centers = cell_centers(self.origin, self.resolution, self.dims)
        dist, _ = self.tree.query(centers, k=1, distance_upper_bound=self.clearances.c_rbk + 1e-12)
        dist = dist.reshape(self.dims)
        return {
            "raw": raw,
            "elas": raw | (dist <= self.clearances.c_elas),
            "rbk": raw | (dist <= self.clearances.c_rbk),
        }

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def delta_r(self) -> float:
        return self.clearances.delta_r

    def cells_of(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.rint((pts - self.origin) / self.resolution).astype(int)

    def cell_of(self, point: np.ndarray) -> Tuple[int, int, int]:
        return tuple(int(x) for x in self.cells_of(point)[0])

    def center(self, cell: Sequence[int]) -> np.ndarray:
        return self.origin + self.resolution * np.asarray(cell, dtype=float)

    def in_bounds_cells(self, cells: np.ndarray) -> np.ndarray:
        cells = np.atleast_2d(cells)
        return np.all((cells >= 0) & (cells < np.asarray(self.dims)), axis=1)

    def in_bounds(self, point: np.ndarray) -> bool:
        return bool(self.in_bounds_cells(self.cells_of(point))[0])

    def is_free_cell(self, cell: Sequence[int], level: str = "rbk") -> bool:
        cell = tuple(int(x) for x in cell)
        if not self.in_bounds_cells(np.array(cell))[0]:
            return False
        return not self.occupied[level][cell]

    def free_mask(self, points: np.ndarray, level: str = "rbk") -> np.ndarray:
        """Vectorized freeness: grid lookup for cell centers, KD distance otherwise."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells = self.cells_of(pts)
        ok = self.in_bounds_cells(cells)
        if not np.any(ok):
            return ok
        on_center = np.all(np.abs(pts - self.center(cells)) < CENTER_TOL, axis=1)
        grid_idx = ok & on_center
        if np.any(grid_idx):
            ok[grid_idx] = ~self.occupied[level][tuple(cells[grid_idx].T)]
        off = ok & ~on_center
        if np.any(off):
            ok[off] = self.clearance(pts[off]) > self.clearances.level(level)
        return ok

    def is_free(self, point: np.ndarray, level: str = "rbk") -> bool:
        return bool(self.free_mask(point, level)[0])

    def clearance(self, points: np.ndarray, upper: float = np.inf) -> np.ndarray:
        """Distance from each point to the nearest obstacle point.

        inf when there is none, or none closer than `upper`.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.tree is None:
            return np.full(pts.shape[0], np.inf)
        dist, _ = self.tree.query(pts, k=1, distance_upper_bound=upper)
        return np.asarray(dist, dtype=float)

    def nn_search(self, point: np.ndarray) -> Tuple[Optional[np.ndarray], float]:
        if self.tree is None:
            return None, float("inf")
        dist, idx = self.tree.query(np.asarray(point, dtype=float), k=1)
        return self.obstacles[int(idx)].copy(), float(dist)

    def crop(self, center: np.ndarray, radius: float) -> "OccupancyWorld":
        """Snapshot holding only obstacles within `radius` of `center`."""
        return OccupancyWorld(self.obstacles[visible_obstacles(self, center, radius)],
                              self.resolution, self.dims, self.clearances, self.origin)


def build_world(obstacles: np.ndarray, resolution: float, dims: Sequence[int],
                clearances: ClearanceLike = DEFAULT_CLEARANCES,
                origin: Sequence[float] = (0.0, 0.0, 0.0)) -> OccupancyWorld:
    if not resolution > 0:
        raise ValueError(f"Invalid resolution={resolution}: must be > 0")
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = dims + (1,)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"Invalid dims={dims}: need 3 positive cell counts")
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 3)
    obs.flags.writeable = False
    org = np.asarray(origin, dtype=float)
    org.flags.writeable = False
    world = OccupancyWorld(obs, float(resolution), dims, as_clearances(clearances), org)
    log.debug("built world dims=%s obstacles=%d rbk_occupied=%d",
              dims, len(obs), int(world.occupied["rbk"].sum()))
    return world


def nn_search(world: OccupancyWorld, point: np.ndarray) -> Tuple[Optional[np.ndarray], float]:
    """Exact nearest raw obstacle point; (None, inf) on an empty world."""
    return world.nn_search(point)


def visible_obstacles(world: OccupancyWorld, center: np.ndarray, radius: float) -> np.ndarray:
    """Indices of obstacle points within the sensing sphere, sorted."""
    if world.tree is None:
        return np.zeros(0, dtype=int)
    return np.array(sorted(world.tree.query_ball_point(np.asarray(center, dtype=float), radius)),
                    dtype=int)


def crop(world: OccupancyWorld, center: np.ndarray, radius: float) -> OccupancyWorld:
    return world.crop(center, radius)


# ---------------------------------------------------------------------------
# Grid graphs
# ---------------------------------------------------------------------------

def _offsets(connectivity: int) -> np.ndarray:
    rng = (-1, 0, 1)
    if connectivity in (4, 8):
        cand = [(dx, dy, 0) for dx in rng for dy in rng if (dx, dy) != (0, 0)]
    elif connectivity in (6, 18, 26):
        cand = [(dx, dy, dz) for dx in rng for dy in rng for dz in rng if (dx, dy, dz) != (0, 0, 0)]
    else:
        raise ValueError(f"Invalid connectivity={connectivity}: use 4/8 (2-D) or 6/18/26 (3-D)")
    limit = {4: 1, 8: 2, 6: 1, 18: 2, 26: 3}[connectivity]
    return np.array([c for c in cand if sum(abs(x) for x in c) <= limit], dtype=int)


class GridGraph:
    """M-connect lattice over a world, free cells judged at one clearance level."""

    def __init__(self, world: OccupancyWorld, connectivity: int = 26, level: str = "rbk"):
        if level not in LEVELS:
            raise ValueError(f"Invalid level={level!r}: use one of {LEVELS}")
        self.world = world
        self.connectivity = connectivity
        self.level = level
        self.offsets = _offsets(connectivity)
        self.offsets.flags.writeable = False
        self.step_lengths = world.resolution * np.linalg.norm(self.offsets, axis=1)

    @property
    def resolution(self) -> float:
        return self.world.resolution

    @property
    def d_max(self) -> float:
        """Longest single control-point step."""
        return float(np.max(self.step_lengths))

    def is_free_cell(self, cell: Sequence[int]) -> bool:
        return self.world.is_free_cell(cell, self.level)

    def neighbors(self, cell: Sequence[int]):
        """Free neighbor cells with their Euclidean step lengths."""
        cells = np.asarray(cell, dtype=int)[None, :] + self.offsets
        ok = self.world.in_bounds_cells(cells)
        out = []
        for c, length, inside in zip(cells, self.step_lengths, ok):
            if inside and not self.world.occupied[self.level][tuple(c)]:
                out.append((tuple(int(x) for x in c), float(length)))
        return out


class AnchoredLattice:
    """Free flags of the lattice through an arbitrary anchor point.

    Lattice cell c sits at anchor + h*c and shares the index of world cell
    base + c. All flags are materialized at once: a view of the inflated
    grid when the anchor is a cell center, one bounded KD query otherwise.
    """

    def __init__(self, graph: GridGraph, anchor: np.ndarray):
        world = graph.world
        self.graph = graph
        self.anchor = np.asarray(anchor, dtype=float)
        self.base = world.cells_of(self.anchor)[0]
        self.aligned = bool(np.all(np.abs(self.anchor - world.center(self.base)) < CENTER_TOL))
        if self.aligned:
            self.free = ~world.occupied[graph.level]
        else:
            idx = np.indices(world.dims).reshape(3, -1).T
            pts = self.anchor[None, :] + world.resolution * (idx - self.base)
            limit = world.clearances.level(graph.level)
            self.free = (world.clearance(pts, upper=limit + 1e-9) > limit).reshape(world.dims)
        self._dims = np.asarray(world.dims)
        self._component: Optional[np.ndarray] = None

    def points(self, cells: np.ndarray) -> np.ndarray:
        return self.anchor[None, :] + self.graph.resolution * np.atleast_2d(cells).astype(float)

    def _lookup(self, grid: np.ndarray, cells: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(cells, dtype=int)) + self.base
        inside = np.all((idx >= 0) & (idx < self._dims), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        out[inside] = grid[tuple(idx[inside].T)]
        return out

    def free_cells(self, cells: np.ndarray) -> np.ndarray:
        return self._lookup(self.free, cells)

    def reachable_cells(self, cells: np.ndarray) -> np.ndarray:
        """Cells joined to the anchor through free cells by graph moves."""
        if self._component is None:
            self._component = np.zeros(self.free.shape, dtype=bool)
            if np.all((self.base >= 0) & (self.base < self._dims)):
                grid = self.free.copy()
                grid[tuple(self.base)] = True
                structure = np.zeros((3, 3, 3), dtype=bool)
                structure[1, 1, 1] = True
                structure[tuple((self.graph.offsets + 1).T)] = True
                labels, _ = ndimage.label(grid, structure=structure)
                self._component = labels == labels[tuple(self.base)]
        return self._lookup(self._component, cells)


def d_max_for(resolution: float, connectivity: int) -> float:
    return float(resolution * np.max(np.linalg.norm(_offsets(connectivity), axis=1)))


# ---------------------------------------------------------------------------
# Synthetic maps
# ---------------------------------------------------------------------------

def grid_dims(size: Sequence[float], resolution: float) -> Tuple[int, int, int]:
    size = list(size) + [resolution] * (3 - len(size))
    return tuple(max(1, int(round(s / resolution))) for s in size)


def sample_pillars(seed: int, area: Sequence[float], density: float,
                   radius_range: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Pillar axes (count, 2) and radii (count,), uniform over the area."""
    if density < 0:
        raise ValueError(f"Invalid density={density}: must be >= 0")
    lo_r, hi_r = float(radius_range[0]), float(radius_range[1])
    if not 0 < lo_r <= hi_r:
        raise ValueError(f"Invalid pillar radius range {radius_range}")
    ax, ay = float(area[0]), float(area[1])
    count = int(round(density * ax * ay))
    rng = np.random.default_rng(seed)
    xy = rng.uniform((0.0, 0.0), (ax, ay), size=(count, 2))
    radii = rng.uniform(lo_r, hi_r, size=count)
    return xy, radii


def generate_random_pillars(seed: int, area: Sequence[float] = (10.0, 10.0),
                            density: float = DEFAULT_PILLAR_DENSITY,
                            radius_range: Sequence[float] = DEFAULT_PILLAR_RADII,
                            resolution: float = DEFAULT_RESOLUTION, height: float = 3.0,
                            origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Vertical cylinders rasterized to cell centers; round(density*area) pillars."""
    xy, radii = sample_pillars(seed, area, density, radius_range)
    if len(xy) == 0:
        return np.zeros((0, 3))

    ax, ay = float(area[0]), float(area[1])
    dims = grid_dims((ax, ay, height), resolution)
    org = np.asarray(origin, dtype=float)
    gx = org[0] + resolution * np.arange(dims[0])
    gy = org[1] + resolution * np.arange(dims[1])
    gz = org[2] + resolution * np.arange(dims[2])
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    cols = np.zeros(xx.shape, dtype=bool)
    for (px, py), r in zip(xy, radii):
        cols |= (xx - px) ** 2 + (yy - py) ** 2 <= r * r
        # thin pillars still occupy their axis cell
        ix = int(np.clip(np.rint((px - org[0]) / resolution), 0, dims[0] - 1))
        iy = int(np.clip(np.rint((py - org[1]) / resolution), 0, dims[1] - 1))
        cols[ix, iy] = True
    ix, iy = np.nonzero(cols)
    pts = [np.column_stack([gx[ix], gy[iy], np.full(len(ix), z)]) for z in gz]
    return np.vstack(pts)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def gradient_noise(seed: int, dims: Tuple[int, int, int], scale: float) -> np.ndarray:
    """3-D gradient (Perlin) noise sampled at every cell, shape dims."""
    rng = np.random.default_rng(seed)
    lattice = tuple(int(np.ceil(d / scale)) + 2 for d in dims)
    grads = rng.normal(size=lattice + (3,))
    grads /= np.linalg.norm(grads, axis=-1, keepdims=True)

    coords = np.indices(dims).reshape(3, -1).T / scale
    base = np.floor(coords).astype(int)
    frac = coords - base
    fade = _fade(frac)
    total = np.zeros(len(coords))
    for corner in np.indices((2, 2, 2)).reshape(3, -1).T:
        g = grads[tuple((base + corner).T)]
        dot = np.einsum("nd,nd->n", g, frac - corner)
        w = np.prod(np.where(corner == 1, fade, 1.0 - fade), axis=1)
        total += w * dot
    return total.reshape(dims)


def generate_noise_map(seed: int, dims: Sequence[int], threshold: float = DEFAULT_NOISE_THRESHOLD,
                       resolution: float = DEFAULT_RESOLUTION, scale: float = DEFAULT_NOISE_SCALE,
                       origin: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Occupied cell centers where normalized noise exceeds threshold."""
    if not 0 < threshold < 1:
        raise ValueError(f"Invalid threshold={threshold}: must lie in (0, 1)")
    dims = tuple(int(d) for d in dims)
    field = gradient_noise(seed, dims, scale)
    lo, hi = float(field.min()), float(field.max())
    if hi > lo:
        norm = NOISE_EPS + (1 - 2 * NOISE_EPS) * (field - lo) / (hi - lo)
    else:
        norm = np.full(dims, 0.5)
    occ = np.argwhere(norm > threshold)
    return np.asarray(origin, dtype=float)[None, :] + resolution * occ


def clear_around(obstacles: np.ndarray, points: Sequence[Sequence[float]], radius: float) -> np.ndarray:
    """Drop obstacle points within radius of any given point (spawn zones)."""
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 3)
    if not len(obs):
        return obs
    keep = np.ones(len(obs), dtype=bool)
    for p in points:
        keep &= np.linalg.norm(obs - np.asarray(p, dtype=float), axis=1) > radius
    return obs[keep]


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------

def export_map(world: OccupancyWorld, path: Path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"# resolution={world.resolution!r} dims={','.join(map(str, world.dims))} "
                f"origin={','.join(repr(float(x)) for x in world.origin)}\n")
        for x, y, z in world.obstacles:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    return path


def load_map(path: Path, clearances: ClearanceLike = DEFAULT_CLEARANCES) -> OccupancyWorld:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}:1: missing map header")
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    pts = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 'x y z', got {line!r}")
        pts.append([float(p) for p in parts])
    return build_world(np.array(pts).reshape(-1, 3), float(header["resolution"]),
                       [int(d) for d in header["dims"].split(",")], clearances,
                       [float(o) for o in header["origin"].split(",")])
