"""Road maps, reference routes and the geometric queries the simulator needs.

Coordinates are metres in a right-handed world frame, traffic drives on the
right. Maps are built from four-way symmetric templates: the geometry for the
road approaching from the south is laid out once and rotated by multiples of
90 degrees for the other approaches.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon, box
from shapely.ops import unary_union


class ScenarioKind(str, enum.Enum):
    INTERSECTION = "intersection"
    ROUNDABOUT = "roundabout"
    BOTTLENECK = "bottleneck"
    STRAIGHT = "straight"


class NoReachableDestinationError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryParams:
    lane_width: float = 3.5
    lanes_per_direction: int = 2
    arm_length: float = 60.0
    roundabout_radius: float = 20.0
    bottleneck_wide_lanes: int = 4
    bottleneck_narrow_lanes: int = 1
    bottleneck_wide_length: float = 50.0
    bottleneck_taper_length: float = 15.0
    bottleneck_narrow_length: float = 30.0
    straight_length: float = 100.0
    checkpoint_spacing: float = 10.0
    spawn_clearance: float = 10.0  # keep spawns this far before the conflict zone

    def validate(self) -> None:
        for name in ("lane_width", "arm_length", "roundabout_radius", "bottleneck_wide_length",
                     "bottleneck_taper_length", "bottleneck_narrow_length", "straight_length",
                     "checkpoint_spacing"):
            if not getattr(self, name) > 0:
                raise ValueError(f"invalid geometry parameter {name}={getattr(self, name)!r}: must be > 0")
        for name in ("lanes_per_direction", "bottleneck_wide_lanes", "bottleneck_narrow_lanes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"invalid geometry parameter {name}: must be >= 1")
        if self.bottleneck_narrow_lanes > self.bottleneck_wide_lanes:
            raise ValueError("bottleneck must narrow: narrow lanes > wide lanes")
        if self.spawn_clearance < 0:
            raise ValueError("spawn_clearance must be >= 0")


# -- polylines ---------------------------------------------------------------
def _clean_polyline(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    keep = [0]
    for i in range(1, len(pts)):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
            keep.append(i)
    return pts[keep]


def arclength(pts: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def rotate(pts, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ np.array([[c, s], [-s, c]])


def _arc(center, radius, a0, a1, n=12) -> np.ndarray:
    t = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)], axis=1)


@dataclass(frozen=True, eq=False)
class LaneSegment:
    id: str
    centerline: np.ndarray
    width: float

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] != 2:
            raise ValueError(f"lane {self.id}: centerline needs >= 2 points")
        if np.any(np.linalg.norm(np.diff(c, axis=0), axis=1) <= 0):
            raise ValueError(f"lane {self.id}: consecutive centerline points must be distinct")
        if not self.width > 0:
            raise ValueError(f"lane {self.id}: width must be > 0")
        object.__setattr__(self, "centerline", c)


@dataclass(frozen=True, eq=False)
class ReferenceRoute:
    waypoints: np.ndarray
    checkpoints: np.ndarray
    checkpoint_s: np.ndarray
    spacing: float
    spawn_road: str = ""
    destination: str = ""
    cum_s: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "cum_s", arclength(self.waypoints))

    @property
    def total_length(self) -> float:
        return float(self.cum_s[-1])

    @property
    def destination_point(self) -> np.ndarray:
        return self.waypoints[-1]

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.total_length))
        k = int(np.clip(np.searchsorted(self.cum_s, s, side="right") - 1, 0, len(self.cum_s) - 2))
        seg = self.cum_s[k + 1] - self.cum_s[k]
        t = (s - self.cum_s[k]) / seg
        return self.waypoints[k] + t * (self.waypoints[k + 1] - self.waypoints[k])

    def tangent_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.total_length))
        k = int(np.clip(np.searchsorted(self.cum_s, s, side="right") - 1, 0, len(self.cum_s) - 2))
        d = self.waypoints[k + 1] - self.waypoints[k]
        return d / np.linalg.norm(d)


def make_route(waypoints, spacing: float, spawn_road: str = "", destination: str = "") -> ReferenceRoute:
    """Route with checkpoints every ``spacing`` metres; the last one sits on the destination."""
    pts = _clean_polyline(waypoints)
    if len(pts) < 2:
        raise ValueError("route needs at least two distinct points")
    total = arclength(pts)[-1]
    s = np.arange(1, int(np.floor(total / spacing)) + 1) * spacing
    s = s[s < total - 1e-9]
    s = np.concatenate([s, [total]])
    proto = ReferenceRoute(pts, np.zeros((0, 2)), s, spacing, spawn_road, destination)
    cps = np.array([proto.point_at(x) for x in s])
    return ReferenceRoute(pts, cps, s, spacing, spawn_road, destination)


def truncate_route(waypoints: np.ndarray, s0: float) -> np.ndarray:
    """Polyline from arc length ``s0`` to the end."""
    cum = arclength(waypoints)
    k = int(np.clip(np.searchsorted(cum, s0, side="right") - 1, 0, len(cum) - 2))
    t = (s0 - cum[k]) / (cum[k + 1] - cum[k])
    start = waypoints[k] + t * (waypoints[k + 1] - waypoints[k])
    return _clean_polyline(np.vstack([start, waypoints[k + 1:]]))


def project_to_route(route: ReferenceRoute, position, s_min: float | None = None,
                     s_max: float | None = None) -> float:
    """Arc length of the closest point on the route polyline.

    ``s_min``/``s_max`` optionally restrict the search window, which keeps the
    projection from jumping between distant parts of a winding route.
    """
    p = np.asarray(position, dtype=np.float64)
    a = route.waypoints[:-1]
    v = np.diff(route.waypoints, axis=0)
    seg_len2 = np.einsum("ij,ij->i", v, v)
    t = np.clip(np.einsum("ij,ij->i", p - a, v) / seg_len2, 0.0, 1.0)
    s = route.cum_s[:-1] + t * np.sqrt(seg_len2)
    outside = np.zeros(len(s), dtype=bool)
    if s_min is not None or s_max is not None:
        lo = -np.inf if s_min is None else s_min
        hi = np.inf if s_max is None else s_max
        outside = (route.cum_s[1:] < lo) | (route.cum_s[:-1] > hi)
        s = np.minimum(np.maximum(s, np.maximum(route.cum_s[:-1], lo)), np.minimum(route.cum_s[1:], hi))
        seg_t = np.clip((s - route.cum_s[:-1]) / np.sqrt(seg_len2), 0.0, 1.0)
        closest = a + seg_t[:, None] * v
    else:
        closest = a + t[:, None] * v
    d2 = np.where(outside, np.inf, np.sum((closest - p) ** 2, axis=1))
    k = int(np.argmin(d2))
    return float(s[k])


def to_ego_frame(vectors, heading) -> np.ndarray:
    """Express world-frame vectors in the frame whose x axis is ``heading``."""
    h = np.asarray(heading, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    return np.stack([v[..., 0] * h[0] + v[..., 1] * h[1], -v[..., 0] * h[1] + v[..., 1] * h[0]], axis=-1)


def upcoming_checkpoints(route: ReferenceRoute, progress: float) -> np.ndarray:
    """World positions of the next two unreached checkpoints (destination repeated)."""
    idx = np.flatnonzero(route.checkpoint_s > progress + 1e-9)
    if len(idx) == 0:
        return np.stack([route.checkpoints[-1]] * 2)
    first = idx[0]
    second = idx[1] if len(idx) > 1 else idx[0]
    return route.checkpoints[[first, second]]


def nearest_checkpoints(route: ReferenceRoute, position, heading, progress: float | None = None) -> np.ndarray:
    """Next two checkpoints relative to the ego vehicle, in its frame, shape (2, 2)."""
    if progress is None:
        progress = project_to_route(route, position)
    cps = upcoming_checkpoints(route, progress)
    return to_ego_frame(cps - np.asarray(position, dtype=np.float64), heading)


# -- raycasting ----------------------------------------------------------------
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0


def footprint(position, heading, length: float = VEHICLE_LENGTH, width: float = VEHICLE_WIDTH) -> np.ndarray:
    """Corners of the oriented vehicle rectangle, counter-clockwise, shape (4, 2)."""
    h = np.asarray(heading, dtype=np.float64)
    n = np.array([-h[1], h[0]])
    p = np.asarray(position, dtype=np.float64)
    hl, hw = 0.5 * length, 0.5 * width
    return np.stack([p + hl * h - hw * n, p + hl * h + hw * n, p - hl * h + hw * n, p - hl * h - hw * n])


def polygon_segments(polys) -> np.ndarray:
    """Closed polygons (K, V, 2) to edge segments (K*V, 2, 2)."""
    polys = np.asarray(polys, dtype=np.float64)
    if polys.size == 0:
        return np.zeros((0, 2, 2))
    nxt = np.roll(polys, -1, axis=1)
    return np.stack([polys, nxt], axis=2).reshape(-1, 2, 2)


def cast_rays(origin, directions, segments=None, circles=None, max_range: float = 50.0) -> np.ndarray:
    """Distance along each unit direction to the first hit, capped at ``max_range``."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    best = np.full(len(d), float(max_range))
    if segments is not None and len(segments):
        a = segments[:, 0]
        e = segments[:, 1] - segments[:, 0]
        ao = a - o
        denom = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
            u = (ao[None, :, 0] * d[:, 1:2] - ao[None, :, 1] * d[:, 0:1]) / denom
        ok = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= 0) & (u <= 1)
        t = np.where(ok, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    if circles is not None and len(circles):
        c = np.asarray(circles, dtype=np.float64)
        oc = o - c[:, :2]
        b = d @ oc.T
        cc = np.einsum("ij,ij->i", oc, oc) - c[:, 2] ** 2
        disc = b * b - cc[None, :]
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        t1, t2 = -b - root, -b + root
        inside = cc[None, :] <= 0
        t = np.where(inside, 0.0, np.where(t1 >= 0, t1, np.inf))
        t = np.where((disc >= 0) & ((t2 >= 0) | inside), t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    return best


def ray_directions(heading, n_rays: int) -> np.ndarray:
    """World directions of rays at angles 2*pi*k/n_rays in the ego frame."""
    ang = 2.0 * np.pi * np.arange(n_rays) / n_rays
    ca, sa = np.cos(ang), np.sin(ang)
    h = np.asarray(heading, dtype=np.float64)
    return np.stack([h[0] * ca - h[1] * sa, h[0] * sa + h[1] * ca], axis=1)


def raycast_lidar(position, heading, others=(), scenario_map: "ScenarioMap | None" = None,
                  n_rays: int = 72, max_range: float = 50.0, circles=None) -> np.ndarray:
    """Normalised lidar distances in [0, 1].

    ``others`` are obstacle polygons (e.g. vehicle footprints), ``circles`` an
    optional (C, 3) array of (x, y, radius) obstacles. ``scenario_map=None``
    means an unbounded map.
    """
    if n_rays < 1 or not max_range > 0:
        raise ValueError("raycast_lidar needs n_rays >= 1 and max_range > 0")
    segs = [polygon_segments(others)] if len(others) else []
    if scenario_map is not None and len(scenario_map.boundary):
        segs.append(scenario_map.boundary)
    segments = np.concatenate(segs) if segs else None
    dist = cast_rays(position, ray_directions(heading, n_rays), segments, circles, max_range)
    return np.clip(dist / max_range, 0.0, 1.0)


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        pa = a @ normals.T
        pb = b @ normals.T
        if np.any((pa.max(axis=0) < pb.min(axis=0)) | (pb.max(axis=0) < pa.min(axis=0))):
            return False
    return True


# -- maps ----------------------------------------------------------------------
APRON = 5.0  # drivable run-out beyond road ends, so route endpoints lie strictly inside
@dataclass(frozen=True, eq=False)
class RouteTemplate:
    lane: str
    destination: str
    waypoints: np.ndarray
    spawn_range: tuple


@dataclass(frozen=True, eq=False)
class SpawnRoad:
    id: str
    destinations: tuple
    templates: tuple


@dataclass(frozen=True, eq=False)
class ScenarioMap:
    kind: ScenarioKind
    lanes: tuple
    boundary: np.ndarray
    rings: tuple
    spawn_roads: tuple
    params: GeometryParams
    lane_profile: tuple

    def spawn_road(self, road_id: str) -> SpawnRoad:
        for r in self.spawn_roads:
            if r.id == road_id:
                return r
        raise KeyError(f"unknown spawn road {road_id!r}")

    def contains(self, points) -> np.ndarray:
        """Even-odd point-in-region test against every boundary ring."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(self.boundary) == 0:
            return np.ones(len(pts), dtype=bool)
        a, b = self.boundary[:, 0], self.boundary[:, 1]
        px, py = pts[:, 0:1], pts[:, 1:2]
        straddle = (a[None, :, 1] > py) != (b[None, :, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = a[None, :, 0] + (py - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / (
                b[None, :, 1] - a[None, :, 1])
        hits = straddle & (px < x_cross)
        return (hits.sum(axis=1) % 2) == 1


def _region_from_shapely(geom) -> tuple:
    polys = [geom] if geom.geom_type == "Polygon" else list(geom.geoms)
    rings = []
    for p in polys:
        rings.append(np.asarray(p.exterior.coords)[:-1])
        rings.extend(np.asarray(r.coords)[:-1] for r in p.interiors)
    segs = np.concatenate([np.stack([r, np.roll(r, -1, axis=0)], axis=1) for r in rings])
    return segs, tuple(rings)


def _intersection(p: GeometryParams):
    w, n, A = p.lane_width, p.lanes_per_direction, p.arm_length
    H = n * w
    E = H + A + APRON
    region = unary_union([box(-E, -H, E, H), box(-H, -E, H, E)])
    boundary, rings = _region_from_shapely(region)
    lanes, roads = [], []
    spawn_hi = max(A - p.spawn_clearance, 2.5)
    for d in range(4):
        rot = d * np.pi / 2
        templates = []
        for k in range(n):
            xk = (k + 0.5) * w
            lanes.append(LaneSegment(f"arm{d}_in{k}", rotate([[xk, -H - A], [xk, -H]], rot), w))
            lanes.append(LaneSegment(f"arm{d}_out{k}", rotate([[-xk, -H], [-xk, -H - A]], rot), w))
            approach = np.array([[xk, -H - A], [xk, -H]])
            right = _arc((H, -H), H - xk, np.pi, np.pi / 2)
            right = np.vstack([approach, right, [[H + A, -xk]]])
            straight = np.vstack([approach, [[xk, H], [xk, H + A]]])
            left = _arc((-H, -H), H + xk, 0.0, np.pi / 2)
            left = np.vstack([approach, left, [[-H - A, xk]]])
            for turn, pts in ((1, right), (2, straight), (3, left)):
                dest = f"arm{(d + turn) % 4}"
                templates.append(RouteTemplate(f"arm{d}_in{k}", dest, _clean_polyline(rotate(pts, rot)),
                                               (0.0, spawn_hi)))
        roads.append(SpawnRoad(f"arm{d}", tuple(f"arm{(d + t) % 4}" for t in (1, 2, 3)), tuple(templates)))
    return tuple(lanes), boundary, rings, tuple(roads), (n, n)


def _roundabout(p: GeometryParams):
    w, n, A, R = p.lane_width, p.lanes_per_direction, p.arm_length, p.roundabout_radius
    ring_w = n * w
    r_in, r_out = R - ring_w / 2, R + ring_w / 2
    if r_in <= n * w:
        raise ValueError("invalid geometry parameter roundabout_radius: island too small for the arms")
    reach = r_out + A
    annulus = Point(0, 0).buffer(r_out, quad_segs=32).difference(Point(0, 0).buffer(r_in, quad_segs=32))
    E = reach + APRON
    arms = [Polygon(rotate([[-n * w, -E], [n * w, -E], [n * w, -R], [-n * w, -R]], d * np.pi / 2))
            for d in range(4)]
    boundary, rings = _region_from_shapely(unary_union([annulus, *arms]))
    lanes, roads = [], []
    spawn_hi = max(A - p.spawn_clearance, 2.5)
    for d in range(4):
        rot = d * np.pi / 2
        templates = []
        for k in range(n):
            xk = (k + 0.5) * w
            rk = r_out - (k + 0.5) * w
            y_meet = -np.sqrt(rk ** 2 - xk ** 2)
            lanes.append(LaneSegment(f"arm{d}_in{k}", rotate([[xk, -reach], [xk, y_meet]], rot), w))
            lanes.append(LaneSegment(f"arm{d}_out{k}", rotate([[-xk, y_meet], [-xk, -reach]], rot), w))
            th_in = np.arctan2(y_meet, xk)
            th_exit = np.arctan2(y_meet, -xk)
            for e in (1, 2, 3):
                th_out = th_exit + e * np.pi / 2
                arc = _arc((0.0, 0.0), rk, th_in, th_out, n=8 * e)
                exit_end = rotate([[-xk, -reach]], e * np.pi / 2)
                pts = np.vstack([[[xk, -reach]], arc, exit_end])
                templates.append(RouteTemplate(f"arm{d}_in{k}", f"arm{(d + e) % 4}",
                                               _clean_polyline(rotate(pts, rot)), (0.0, spawn_hi)))
        roads.append(SpawnRoad(f"arm{d}", tuple(f"arm{(d + e) % 4}" for e in (1, 2, 3)), tuple(templates)))
    for k in range(n):
        rk = r_out - (k + 0.5) * w
        ring = _arc((0.0, 0.0), rk, 0.0, 2 * np.pi, n=64)[:-1]
        lanes.append(LaneSegment(f"ring{k}", ring, w))
    return tuple(lanes), boundary, rings, tuple(roads), (n, n)


def _bottleneck(p: GeometryParams):
    w = p.lane_width
    nw, nn = p.bottleneck_wide_lanes, p.bottleneck_narrow_lanes
    Lw, T, Ln = p.bottleneck_wide_length, p.bottleneck_taper_length, p.bottleneck_narrow_length
    x = [-(Ln / 2 + T + Lw), -(Ln / 2 + T), -Ln / 2, Ln / 2, Ln / 2 + T, Ln / 2 + T + Lw]
    hw, hn = nw * w, nn * w
    upper = [(x[0] - APRON, hw), (x[1], hw), (x[2], hn), (x[3], hn), (x[4], hw), (x[5] + APRON, hw)]
    ring = np.array(upper + [(px, -py) for px, py in reversed(upper)])
    boundary = np.stack([ring, np.roll(ring, -1, axis=0)], axis=1)
    lanes, roads = [], []
    spawn_hi = max(Lw - 5.0, 2.5)
    for d, (name, far) in enumerate((("west", "east"), ("east", "west"))):
        rot = d * np.pi
        templates = []
        for k in range(nw):
            yk = -(k + 0.5) * w
            j = min(k, nn - 1)
            yj = -(j + 0.5) * w
            lanes.append(LaneSegment(f"{name}_in{k}", rotate([[x[0], yk], [x[1], yk]], rot), w))
            lanes.append(LaneSegment(f"{far}_out{k}", rotate([[x[4], yk], [x[5], yk]], rot), w))
            for k2 in range(nw):
                y2 = -(k2 + 0.5) * w
                pts = [[x[0], yk], [x[1], yk], [x[2], yj], [x[3], yj], [x[4], y2], [x[5], y2]]
                templates.append(RouteTemplate(f"{name}_in{k}", f"{far}_out{k2}",
                                               _clean_polyline(rotate(pts, rot)), (0.0, spawn_hi)))
        for j in range(nn):
            yj = -(j + 0.5) * w
            lanes.append(LaneSegment(f"{name}_narrow{j}", rotate([[x[2], yj], [x[3], yj]], rot), w))
        roads.append(SpawnRoad(name, tuple(f"{far}_out{k}" for k in range(nw)), tuple(templates)))
    return tuple(lanes), boundary, (ring,), tuple(roads), (nw, nn)


def _straight(p: GeometryParams):
    w, L = p.lane_width, p.straight_length
    ring = np.array([[-APRON, -w / 2], [L + APRON, -w / 2], [L + APRON, w / 2], [-APRON, w / 2]])
    boundary = np.stack([ring, np.roll(ring, -1, axis=0)], axis=1)
    lane = LaneSegment("lane0", np.array([[0.0, 0.0], [L, 0.0]]), w)
    road = SpawnRoad("start", ("end",), (RouteTemplate("lane0", "end", lane.centerline, (0.0, 0.0)),))
    return (lane,), boundary, (ring,), (road,), (1, 1)


_BUILDERS = {
    ScenarioKind.INTERSECTION: _intersection,
    ScenarioKind.ROUNDABOUT: _roundabout,
    ScenarioKind.BOTTLENECK: _bottleneck,
    ScenarioKind.STRAIGHT: _straight,
}


def build_scenario(kind, params: GeometryParams | None = None) -> ScenarioMap:
    kind = ScenarioKind(kind)
    params = params or GeometryParams()
    params.validate()
    lanes, boundary, rings, roads, profile = _BUILDERS[kind](params)
    return ScenarioMap(kind, lanes, np.asarray(boundary, dtype=np.float64), rings, roads, params, profile)


def sample_route(scenario_map: ScenarioMap, spawn_road: str, rng: np.random.Generator) -> ReferenceRoute:
    """Random destination, lane and spawn offset on ``spawn_road``."""
    road = scenario_map.spawn_road(spawn_road)
    if not road.destinations or not road.templates:
        raise NoReachableDestinationError(f"spawn road {spawn_road!r} has no reachable destination")
    dest = road.destinations[int(rng.integers(len(road.destinations)))]
    options = [t for t in road.templates if t.destination == dest]
    tpl = options[int(rng.integers(len(options)))]
    lo, hi = tpl.spawn_range
    s0 = lo if hi <= lo else float(rng.uniform(lo, hi))
    pts = tpl.waypoints if s0 == 0.0 else truncate_route(tpl.waypoints, s0)
    return make_route(pts, scenario_map.params.checkpoint_spacing, road.id, dest)
