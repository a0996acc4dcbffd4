import numpy as np
import pytest

from planner.env_map import (
    AnchoredLattice,
    Clearances,
    GridGraph,
    build_world,
    clear_around,
    crop,
    d_max_for,
    export_map,
    generate_noise_map,
    generate_random_pillars,
    grid_dims,
    load_map,
    nn_search,
    sample_pillars,
    visible_obstacles,
)


def dot_world(**overrides):
    """5x5 plane, one obstacle point at (2, 2)."""
    params = {"obstacles": np.array([[2.0, 2.0, 0.0]]), "resolution": 1.0, "dims": (5, 5),
              "clearances": (1.0, 0.5, 0.0)}
    params.update(overrides)
    return build_world(**params)


def test_two_level_inflation_counts():
    world = dot_world()
    assert world.dims == (5, 5, 1)
    assert int(world.occupied["raw"].sum()) == 1
    assert int(world.occupied["elas"].sum()) == 1
    assert int(world.occupied["rbk"].sum()) == 5
    assert not world.is_free_cell((1, 2, 0), "rbk")
    assert world.is_free_cell((1, 2, 0), "elas")
    assert world.is_free_cell((1, 1, 0), "rbk")
    assert not world.is_free_cell((7, 1, 0))


def test_free_mask_off_center_uses_distance():
    world = dot_world()
    pts = np.array([[2.5, 2.0, 0.0], [0.3, 0.0, 0.0], [9.0, 0.0, 0.0]])
    assert list(world.free_mask(pts, "elas")) == [False, True, False]
    assert world.is_free([0.3, 0.0, 0.0], "rbk")


def test_clearances_must_be_ordered():
    with pytest.raises(ValueError):
        Clearances(0.2, 0.4, 0.1)
    with pytest.raises(ValueError):
        dot_world(clearances=(1.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        dot_world(resolution=0.0)


def test_nn_search():
    world = dot_world()
    point, dist = nn_search(world, [2.0, 5.0, 0.0])
    assert np.allclose(point, [2, 2, 0])
    assert dist == pytest.approx(3.0)
    empty = dot_world(obstacles=np.zeros((0, 3)))
    assert nn_search(empty, [1.0, 1.0, 0.0]) == (None, float("inf"))
    assert np.all(np.isinf(empty.clearance([[0, 0, 0], [1, 1, 0]])))


def test_crop_keeps_only_nearby_obstacles():
    obs = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [4.0, 4.0, 0.0]])
    world = dot_world(obstacles=obs)
    assert list(visible_obstacles(world, [4.0, 1.0, 0.0], 2.0)) == [1]
    local = crop(world, [4.0, 1.0, 0.0], 2.0)
    assert len(local.obstacles) == 1
    assert local.dims == world.dims
    assert local.is_free_cell((0, 0, 0), "raw")


@pytest.mark.parametrize("connectivity", [4, 8, 6, 18, 26])
def test_offset_counts(connectivity):
    world = dot_world() if connectivity in (4, 8) else build_world(np.zeros((0, 3)), 1.0, (3, 3, 3))
    graph = GridGraph(world, connectivity)
    assert len(graph.offsets) == connectivity
    assert len({tuple(o) for o in graph.offsets}) == connectivity


def test_neighbors_skip_inflated_cells():
    graph = GridGraph(dot_world(), 8, level="rbk")
    nbrs = dict(graph.neighbors((1, 1, 0)))
    assert set(nbrs) == {(0, 0, 0), (0, 1, 0), (0, 2, 0), (1, 0, 0), (2, 0, 0)}
    assert nbrs[(0, 1, 0)] == pytest.approx(1.0)
    assert nbrs[(2, 0, 0)] == pytest.approx(np.sqrt(2))
    assert graph.d_max == pytest.approx(np.sqrt(2))
    assert d_max_for(1.0 / 6.0, 26) == pytest.approx(np.sqrt(3) / 6.0)
    with pytest.raises(ValueError):
        GridGraph(dot_world(), 10)


def test_random_pillars_are_deterministic():
    a = generate_random_pillars(5, (4.0, 4.0), density=0.5, resolution=0.25, height=1.0)
    b = generate_random_pillars(5, (4.0, 4.0), density=0.5, resolution=0.25, height=1.0)
    c = generate_random_pillars(6, (4.0, 4.0), density=0.5, resolution=0.25, height=1.0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # every pillar spans the full height
    assert set(np.round(a[:, 2], 6)) == {0.0, 0.25, 0.5, 0.75}
    assert len(generate_random_pillars(5, (4.0, 4.0), density=0.0)) == 0


def test_noise_map_threshold():
    dims = grid_dims((3.0, 3.0, 1.0), 0.25)
    assert dims == (12, 12, 4)
    dense = generate_noise_map(1, dims, threshold=0.3, resolution=0.25)
    sparse = generate_noise_map(1, dims, threshold=0.8, resolution=0.25)
    assert len(dense) > len(sparse) > 0
    assert np.array_equal(sparse, generate_noise_map(1, dims, threshold=0.8, resolution=0.25))
    with pytest.raises(ValueError):
        generate_noise_map(1, dims, threshold=1.0)


def test_clear_around():
    obs = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    assert np.array_equal(clear_around(obs, [[0.2, 0.0, 0.0]], 1.0), obs[1:])


def test_map_file_round_trip(tmp_path):
    world = dot_world(obstacles=np.array([[2.0, 2.0, 0.0], [0.1, 3.3, 0.0]]), origin=(0.5, 0, 0))
    path = export_map(world, tmp_path / "map.txt")
    back = load_map(path, (1.0, 0.5, 0.0))
    assert np.array_equal(back.obstacles, world.obstacles)
    assert back.dims == world.dims
    assert np.array_equal(back.origin, world.origin)
    assert np.array_equal(back.occupied["rbk"], world.occupied["rbk"])


def test_load_map_reports_bad_line(tmp_path):
    path = tmp_path / "map.txt"
    path.write_text("# resolution=1.0 dims=3,3,1 origin=0.0,0.0,0.0\n1 1 0\n1 2\n")
    with pytest.raises(ValueError, match="map.txt:3"):
        load_map(path)


def scatter_world(seed=0, n=1000, dims=(20, 20, 5), clearances=(0.6, 0.3, 0.1)):
    rng = np.random.default_rng(seed)
    obs = rng.uniform((0, 0, 0), np.asarray(dims) - 1, size=(n, 3))
    return build_world(obs, 1.0, dims, clearances)


def test_nn_search_matches_a_linear_scan():
    world = scatter_world()
    rng = np.random.default_rng(1)
    for q in rng.uniform((-2, -2, -2), (22, 22, 7), size=(100, 3)):
        dists = np.linalg.norm(world.obstacles - q, axis=1)
        point, dist = nn_search(world, q)
        assert dist == pytest.approx(dists.min(), abs=1e-12)
        assert np.linalg.norm(point - q) == pytest.approx(dists.min(), abs=1e-12)


def test_inflated_grids_are_nested_and_match_distances():
    world = scatter_world(seed=4, n=150)
    raw, elas, rbk = (world.occupied[name] for name in ("raw", "elas", "rbk"))
    assert np.all(raw <= elas) and np.all(elas <= rbk)
    assert raw.sum() <= elas.sum() < rbk.sum()
    centers = np.indices(world.dims).reshape(3, -1).T.astype(float)
    nearest = np.min(np.linalg.norm(centers[:, None, :] - world.obstacles[None, :, :], axis=2), axis=1)
    nearest = nearest.reshape(world.dims)
    assert np.array_equal(elas & ~raw, (nearest <= 0.3) & ~raw)
    assert np.array_equal(rbk & ~raw, (nearest <= 0.6) & ~raw)


def test_pillar_count_follows_density():
    xy, radii = sample_pillars(0, (10.0, 10.0), 0.25, (0.1, 0.3))
    assert len(xy) == len(radii) == round(0.25 * 100) == 25
    assert np.all((xy >= 0) & (xy <= 10.0))
    assert np.all((radii >= 0.1) & (radii <= 0.3))
    with pytest.raises(ValueError):
        sample_pillars(0, (10.0, 10.0), -1.0, (0.1, 0.3))
    with pytest.raises(ValueError):
        sample_pillars(0, (10.0, 10.0), 0.25, (0.3, 0.1))


def test_anchored_lattice_agrees_with_free_mask():
    world = scatter_world(seed=2, n=40, dims=(10, 10, 1), clearances=(1.0, 0.5, 0.0))
    graph = GridGraph(world, 8, level="rbk")
    cells = np.array([(x, y, 0) for x in range(-4, 10) for y in range(-4, 10)])

    on_grid = AnchoredLattice(graph, np.array([3.0, 4.0, 0.0]))
    assert on_grid.aligned
    assert np.array_equal(on_grid.free_cells(cells),
                          world.free_mask(on_grid.points(cells), "rbk"))

    off_grid = AnchoredLattice(graph, np.array([2.3, 2.6, 0.0]))
    assert not off_grid.aligned
    assert np.allclose(off_grid.points([[1, -1, 0]]), [[3.3, 1.6, 0.0]])
    assert np.array_equal(off_grid.free_cells(cells),
                          world.free_mask(off_grid.points(cells), "rbk"))


def test_reachable_cells_exclude_enclosed_pockets():
    ring = [(x, y, 0.0) for x in (4, 5, 6) for y in (4, 5, 6) if (x, y) != (5, 5)]
    world = build_world(np.array(ring), 1.0, (8, 8), (0.5, 0.25, 0.0))
    lattice = AnchoredLattice(GridGraph(world, 8, level="rbk"), np.array([1.0, 1.0, 0.0]))
    pocket, outside, anchor = [4, 4, 0], [6, 6, 0], [0, 0, 0]
    assert list(lattice.free_cells([pocket, outside])) == [True, True]
    assert list(lattice.reachable_cells([pocket, outside, anchor])) == [False, True, True]
    assert not lattice.reachable_cells([[20, 0, 0]])[0]
