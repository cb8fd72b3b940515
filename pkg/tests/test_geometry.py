import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coin.geometry import (
    GeometryParams,
    NoReachableDestinationError,
    ScenarioKind,
    ScenarioMap,
    SpawnRoad,
    build_scenario,
    footprint,
    make_route,
    nearest_checkpoints,
    project_to_route,
    raycast_lidar,
    rectangles_overlap,
    rotate,
    sample_route,
)

ALL_KINDS = list(ScenarioKind)


# -- build_scenario --------------------------------------------------------------------
def test_intersection_has_four_spawn_roads():
    m = build_scenario("intersection")
    assert len(m.spawn_roads) == 4
    assert all(len(r.destinations) == 3 for r in m.spawn_roads)


def test_bottleneck_lane_profile_narrows_four_to_one():
    assert build_scenario("bottleneck").lane_profile == (4, 1)


def test_straight_road_is_single_lane():
    m = build_scenario("straight", GeometryParams(straight_length=100.0))
    assert len(m.lanes) == 1 and len(m.spawn_roads) == 1
    assert m.spawn_roads[0].destinations == ("end",)


def test_roundabout_has_four_entries():
    assert len(build_scenario("roundabout").spawn_roads) == 4


@pytest.mark.parametrize("field", ["arm_length", "lane_width", "roundabout_radius"])
@pytest.mark.parametrize("value", [0.0, -3.0])
def test_non_positive_dimensions_rejected(field, value):
    with pytest.raises(ValueError, match="invalid geometry parameter"):
        build_scenario("intersection", GeometryParams(**{field: value}))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_lane_centerlines_and_routes_inside_region(kind):
    m = build_scenario(kind)
    for lane in m.lanes:
        dense = np.concatenate([np.linspace(a, b, 20) for a, b in zip(lane.centerline[:-1], lane.centerline[1:])])
        assert m.contains(dense).all(), lane.id
    rng = np.random.default_rng(0)
    for road in m.spawn_roads:
        assert road.destinations
        for _ in range(5):
            r = sample_route(m, road.id, rng)
            assert m.contains(r.waypoints).all()


# -- sample_route ------------------------------------------------------------------------
def test_straight_route_is_the_lane_centerline():
    m = build_scenario("straight")
    r = sample_route(m, "start", np.random.default_rng(0))
    np.testing.assert_array_equal(r.waypoints, m.lanes[0].centerline)


def test_sample_route_is_seeded():
    m = build_scenario("intersection")
    a = sample_route(m, "arm0", np.random.default_rng(7))
    b = sample_route(m, "arm0", np.random.default_rng(7))
    np.testing.assert_array_equal(a.waypoints, b.waypoints)
    assert a.destination == b.destination


def test_all_three_exits_reachable_from_one_arm():
    m = build_scenario("intersection")
    rng = np.random.default_rng(1)
    seen = {sample_route(m, "arm0", rng).destination for _ in range(1000)}
    assert seen == set(m.spawn_road("arm0").destinations) and len(seen) == 3


def test_no_reachable_destination():
    m = build_scenario("straight")
    broken = ScenarioMap(m.kind, m.lanes, m.boundary, m.rings, (SpawnRoad("start", (), ()),), m.params,
                         m.lane_profile)
    with pytest.raises(NoReachableDestinationError):
        sample_route(broken, "start", np.random.default_rng(0))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_checkpoint_spacing_uniform_except_last(kind):
    m = build_scenario(kind)
    rng = np.random.default_rng(3)
    for road in m.spawn_roads:
        r = sample_route(m, road.id, rng)
        gaps = np.diff(np.concatenate([[0.0], r.checkpoint_s]))
        np.testing.assert_allclose(gaps[:-1], r.spacing, atol=1e-9)
        assert 0 < gaps[-1] <= r.spacing + 1e-9
        for cp, s in zip(r.checkpoints, r.checkpoint_s):
            np.testing.assert_allclose(cp, r.point_at(s), atol=1e-12)


# -- projection ---------------------------------------------------------------------------
def test_projection_examples():
    r = make_route([[0, 0], [100, 0]], 10.0)
    assert project_to_route(r, [10.0, 2.0]) == 10.0
    assert project_to_route(r, [0.0, 0.0]) == 0.0


def test_projection_near_elbow_matches_dense_sampling():
    r = make_route([[0, 0], [30, 0], [30, 30]], 10.0)
    p = np.array([28.7, 1.9])
    s = np.arange(0, r.total_length, 1e-3)
    pts = np.array([r.point_at(x) for x in s])
    oracle = s[np.argmin(np.linalg.norm(pts - p, axis=1))]
    assert abs(project_to_route(r, p) - oracle) < 1e-3


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=6, unique=True))
def test_projection_exact_at_vertices(pts):
    pts = np.array(pts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seg < 1e-3):
        return
    r = make_route(pts, 5.0)
    for k in range(len(r.waypoints)):
        s = project_to_route(r, r.waypoints[k], r.cum_s[k] - 1e-6, r.cum_s[k] + 1e-6)
        assert abs(s - r.cum_s[k]) < 1e-9


def test_projection_monotone_along_forward_traversal():
    m = build_scenario("roundabout")
    r = sample_route(m, "arm1", np.random.default_rng(2))
    prev = 0.0
    for s in np.linspace(0, r.total_length, 400):
        cur = project_to_route(r, r.point_at(s), prev - 2.0, prev + 7.0)
        assert cur >= prev - 1e-9
        prev = cur


# -- checkpoints ---------------------------------------------------------------------------
def test_nearest_checkpoints_examples():
    r = make_route([[0, 0], [10, 0]], 5.0)
    np.testing.assert_allclose(nearest_checkpoints(r, [0, 0], [1, 0], 0.0), [[5, 0], [10, 0]])
    r2 = make_route([[0, 0], [5, 0]], 5.0)
    np.testing.assert_allclose(nearest_checkpoints(r2, [0, 0], [0, 1], 0.0), [[0, -5], [0, -5]], atol=1e-12)
    np.testing.assert_allclose(nearest_checkpoints(r, [7, 0], [1, 0], 7.0), [[3, 0], [3, 0]])


# -- raycasting ------------------------------------------------------------------------------
def test_lidar_unbounded_is_all_ones():
    out = raycast_lidar([0, 0], [1, 0])
    assert out.shape == (72,) and np.all(out == 1.0)


def test_lidar_circle_ahead():
    out = raycast_lidar([0, 0], [1, 0], circles=np.array([[10.0, 0.0, 1.0]]))
    assert out[0] == pytest.approx(0.18, abs=1e-12)
    # sampling cross-check along the forward ray
    t = np.linspace(0, 50, 10**4 + 1)
    first = t[np.argmax(np.hypot(t - 10.0, 0.0) <= 1.0)]
    assert abs(out[0] * 50 - first) <= 50 / 10**4
    far = raycast_lidar([0, 0], [1, 0], circles=np.array([[60.0, 0.0, 1.0]]))
    assert far[0] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-np.pi, np.pi), st.integers(1, 90),
       st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.floats(-np.pi, np.pi)), max_size=4))
def test_lidar_rotation_equivariant(angle, yaw, n_rays, obstacles):
    pos = np.array([1.5, -2.0])
    head = np.array([np.cos(yaw), np.sin(yaw)])
    polys = [footprint(np.array([x, y]), np.array([np.cos(h), np.sin(h)])) for x, y, h in obstacles]
    base = raycast_lidar(pos, head, polys, n_rays=n_rays)
    rot = raycast_lidar(rotate(pos[None], angle)[0], rotate(head[None], angle)[0],
                        [rotate(p, angle) for p in polys], n_rays=n_rays)
    assert base.shape == (n_rays,) and np.all((base >= 0) & (base <= 1))
    np.testing.assert_allclose(rot, base, atol=1e-9)


def test_rectangles_overlap():
    a = footprint(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert rectangles_overlap(a, footprint(np.array([4.0, 0.0]), np.array([1.0, 0.0])))
    assert not rectangles_overlap(a, footprint(np.array([4.6, 0.0]), np.array([1.0, 0.0])))
    assert not rectangles_overlap(a, footprint(np.array([0.0, 2.1]), np.array([1.0, 0.0])))
