import math

import numpy as np
import pytest

from objnav.world import (
    FORWARD_STEP, FREE, WALL, Action, Floorplan, Pose, SensorConfig, WorldConfig, category_distance_field,
    dijkstra_field, floorplan_from_dict, floorplan_to_dict, generate_world, geodesic_distance, observe, step,
)
from scipy import ndimage


def box_world(n=40, res=0.05):
    cells = np.zeros((n, n), dtype=np.int16)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    return Floorplan(cells, res, 4, 2, np.argwhere(cells == FREE))


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(seed=3))


def test_generation_is_seeded(world):
    assert generate_world(WorldConfig(seed=3)) == world
    assert generate_world(WorldConfig(seed=4)) != world


def test_free_space_connected_and_targets_present(world):
    _, n = ndimage.label(world.cells == FREE)
    assert n == 1
    for k in range(1, world.n_targets + 1):
        assert (world.cells == k).any()
        assert np.isfinite(category_distance_field(world, k)[world.cells == FREE]).all()


def test_spawn_cells_are_free(world):
    sc = world.spawn_candidates
    assert len(sc) > 0
    assert (world.cells[sc[:, 0], sc[:, 1]] == FREE).all()


@pytest.mark.parametrize("kw", [dict(size=16), dict(room_count=0), dict(n_targets=16), dict(object_density=-1),
                                dict(size=48, room_count=6, object_density=0.5)])
def test_invalid_world_configs_raise(kw):
    with pytest.raises(ValueError):
        generate_world(WorldConfig(**kw))


def test_floorplan_roundtrip(world):
    assert floorplan_from_dict(floorplan_to_dict(world)) == world


def test_pose_validates_heading():
    with pytest.raises(ValueError):
        Pose(0.0, 0.0, 45)
    with pytest.raises(ValueError):
        Pose(0.0, 0.0, 360)


def test_step_kinematics():
    w = box_world()
    p = Pose(1.0, 1.0, 0)
    assert step(w, p, Action.TURN_LEFT) == (Pose(1.0, 1.0, 30), False)
    assert step(w, p, Action.TURN_RIGHT) == (Pose(1.0, 1.0, 330), False)
    assert step(w, p, Action.STOP) == (p, False)
    q, hit = step(w, p, Action.MOVE_FORWARD)
    assert not hit and q == Pose(1.0 + FORWARD_STEP, 1.0, 0)
    q, hit = step(w, Pose(1.0, 1.0, 60), Action.MOVE_FORWARD)
    assert math.isclose(math.hypot(q.x - 1.0, q.y - 1.0), FORWARD_STEP, abs_tol=1e-6)


def test_forward_into_wall_collides():
    w = box_world()
    p = Pose(1.9, 1.0, 0)  # wall column starts at x = 1.95
    assert step(w, p, Action.MOVE_FORWARD) == (p, True)


def test_observe_measures_distance_to_wall():
    w = box_world()
    s = SensorConfig(n_rays=5, fov_deg=40.0, max_range=5.0)
    d, sem = observe(w, Pose(1.0, 1.0, 0), s)
    mid = d.ranges[2]
    assert mid == pytest.approx(0.95, abs=1e-9)
    exp = 0.95 / np.cos(np.radians(s.relative_angles_deg()))
    assert np.allclose(d.ranges, exp, atol=1e-9)
    assert (sem.labels == w.wall_category).all()


def test_observe_clamps_at_max_range():
    w = box_world(200)
    d, sem = observe(w, Pose(1.0, 5.0, 0), SensorConfig(n_rays=3, fov_deg=10.0, max_range=2.0))
    assert (d.ranges == 2.0).all()
    assert (sem.labels == 0).all()


def test_observe_rejects_blocked_pose():
    with pytest.raises(ValueError):
        observe(box_world(), Pose(0.01, 0.01, 0))


def test_label_noise_needs_rng():
    with pytest.raises(ValueError):
        observe(box_world(), Pose(1.0, 1.0, 0), SensorConfig(label_noise=0.5))


def test_dijkstra_open_grid_octile():
    free = np.ones((30, 30), bool)
    d = dijkstra_field(free, [(0, 0)], 1.0)
    ii, jj = np.mgrid[0:30, 0:30]
    lo, hi = np.minimum(ii, jj), np.maximum(ii, jj)
    assert np.allclose(d, (hi - lo) + math.sqrt(2) * lo)


def test_dijkstra_no_corner_cutting():
    free = np.ones((3, 3), bool)
    free[0, 1] = free[1, 0] = False
    d = dijkstra_field(free, [(0, 0)], 1.0)
    assert np.isinf(d[1, 1]) or d[1, 1] > math.sqrt(2)


def test_geodesic_distance_symmetric(world):
    sc = world.spawn_candidates
    a = world.cell_center(*sc[0])
    b = world.cell_center(*sc[len(sc) // 2])
    assert geodesic_distance(world, a, b) == pytest.approx(geodesic_distance(world, b, a), rel=1e-9)
    assert geodesic_distance(world, a, a) == 0.0
    assert geodesic_distance(world, a, b) >= math.dist(a, b) - 2 * world.resolution


def test_single_room_without_clutter():
    w = generate_world(WorldConfig(size=64, room_count=1, object_density=0.0, seed=1))
    cats = set(np.unique(w.cells).tolist()) - {FREE, WALL}
    assert cats == set(range(1, w.n_targets + 1))


def test_small_world_connected():
    w = generate_world(WorldConfig(size=64, room_count=4, seed=3, n_targets=3, object_density=0.0))
    _, n = ndimage.label(w.cells == FREE)
    assert n == 1


def test_center_ray_one_meter_from_wall():
    w = box_world(100)
    s = SensorConfig(n_rays=3, fov_deg=20.0)
    d, _ = observe(w, Pose(w.resolution * 99 - 1.0, 2.0, 0), s)
    assert abs(d.ranges[1] - 1.0) <= w.resolution / 2


def test_observe_is_repeatable():
    w = box_world()
    a, sa = observe(w, Pose(1.0, 0.7, 120))
    b, sb = observe(w, Pose(1.0, 0.7, 120))
    assert np.array_equal(a.ranges, b.ranges) and np.array_equal(sa.labels, sb.labels)


def test_twelve_left_turns_close():
    w = box_world()
    p = q = Pose(1.0, 1.0, 60)
    for _ in range(12):
        q, _ = step(w, q, Action.TURN_LEFT)
    assert q == p


def test_corridor_distance():
    cells = np.full((3, 14), WALL, dtype=np.int16)
    cells[1, 1:13] = FREE
    w = Floorplan(cells, 0.05, 4, 2, np.argwhere(cells == FREE))
    a, b = w.cell_center(1, 1), w.cell_center(1, 11)
    assert geodesic_distance(w, a, b) == pytest.approx(10 * 0.05)


def _reference_dijkstra(free, src, res):
    import heapq

    h, w = free.shape
    d = np.full(free.shape, np.inf)
    d[src] = 0.0
    pq = [(0.0, src)]
    while pq:
        du, (i, j) = heapq.heappop(pq)
        if du > d[i, j]:
            continue
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = i + di, j + dj
                if (di, dj) == (0, 0) or not (0 <= ni < h and 0 <= nj < w) or not free[ni, nj]:
                    continue
                if di and dj and not (free[i + di, j] and free[i, j + dj]):
                    continue
                nd = du + res * (math.sqrt(2) if di and dj else 1.0)
                if nd < d[ni, nj]:
                    d[ni, nj] = nd
                    heapq.heappush(pq, (nd, (ni, nj)))
    return d


def test_dijkstra_around_wall_matches_reference():
    free = np.ones((25, 25), bool)
    free[3:20, 12] = False
    free[10, 5:12] = False
    ref = _reference_dijkstra(free, (15, 3), 0.05)
    got = dijkstra_field(free, [(15, 3)], 0.05)
    assert np.array_equal(np.isinf(ref), np.isinf(got))
    fin = np.isfinite(ref)
    assert np.allclose(got[fin], ref[fin], rtol=0, atol=1e-12)
