"""Multi-agent driving environment with respawning vehicles.

Each agent slot hosts a sequence of vehicle *lives*: when a vehicle succeeds,
crashes or leaves the road it is removed and (if respawn is enabled) a fresh
vehicle with a new route takes the slot at the end of the same step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    GeometryParams,
    ReferenceRoute,
    ScenarioKind,
    ScenarioMap,
    build_scenario,
    cast_rays,
    footprint,
    polygon_segments,
    project_to_route,
    raycast_lidar,
    rectangles_overlap,
    sample_route,
    to_ego_frame,
    upcoming_checkpoints,
)

EGO_DIM = 19
LIDAR_DIM = 72
OBS_DIM = EGO_DIM + LIDAR_DIM
STATE_DIM = 10
ACTION_DIM = 2


class Status(str, enum.Enum):
    ACTIVE = "active"
    SUCCEEDED = "succeeded"
    COLLIDED = "collided"
    OFF_ROAD = "off_road"


class SpawnCongestionError(RuntimeError):
    pass


class MissingActionError(KeyError):
    pass


class EmptyActiveSetError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.5
    max_steer: float = 0.6
    max_accel: float = 3.0
    max_brake: float = 6.0
    v_max: float = 10.0
    drag: float = 0.05  # 1/s, only while coasting or braking
    length: float = 4.5
    width: float = 2.0


@dataclass(frozen=True)
class EnvConfig:
    scenario: str = "intersection"
    geometry: GeometryParams = field(default_factory=GeometryParams)
    n_agents: int = 30
    dt: float = 0.1
    horizon: int = 1000
    c1: float = 1.0
    c2: float = 0.1
    success_reward: float = 10.0
    crash_penalty: float = -5.0
    off_road_penalty: float = -5.0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    respawn: bool = True
    lidar_rays: int = LIDAR_DIM
    lidar_range: float = 50.0
    boundary_range: float = 10.0
    position_scale: float = 50.0
    spawn_speed: float = 0.0
    spawn_gap: float = 1.0
    spawn_retries: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.lidar_rays != LIDAR_DIM:
            raise ValueError(f"observation layout fixes lidar_rays at {LIDAR_DIM}")
        ScenarioKind(self.scenario)
        self.geometry.validate()

    @property
    def goal_tolerance(self) -> float:
        return self.geometry.checkpoint_spacing


@dataclass(frozen=True, eq=False)
class VehicleState:
    position: np.ndarray
    heading: np.ndarray
    speed: float
    steering_angle: float
    route: ReferenceRoute
    progress: float
    status: Status = Status.ACTIVE
    yaw_rate: float = 0.0
    last_action: np.ndarray = field(default_factory=lambda: np.zeros(2))
    life: int = 0

    @property
    def velocity(self) -> np.ndarray:
        return self.heading * self.speed

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.heading[1], self.heading[0]))


def apply_dynamics(state: VehicleState, action, dt: float, params: VehicleParams = VehicleParams()) -> VehicleState:
    """Kinematic bicycle step (semi-implicit Euler). Positive steering turns left."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    delta = a[0] * params.max_steer
    if a[1] > 0:
        acc = a[1] * params.max_accel
    else:
        acc = a[1] * params.max_brake - params.drag * state.speed
    speed = float(np.clip(state.speed + acc * dt, 0.0, params.v_max))
    yaw_rate = speed * np.tan(delta) / params.wheelbase
    dpsi = yaw_rate * dt
    c, s = np.cos(dpsi), np.sin(dpsi)
    h = state.heading
    heading = np.array([c * h[0] - s * h[1], s * h[0] + c * h[1]])
    heading /= np.linalg.norm(heading)
    position = state.position + heading * speed * dt
    return replace(state, position=position, heading=heading, speed=speed, steering_angle=float(delta),
                   yaw_rate=float(yaw_rate), last_action=a)


def compute_individual_reward(prev_progress: float, progress: float, speed: float, outcome: Status,
                              config: EnvConfig = EnvConfig()) -> float:
    driving = progress - prev_progress
    speed_term = speed / config.vehicle.v_max
    terminal = {Status.SUCCEEDED: config.success_reward, Status.COLLIDED: config.crash_penalty,
                Status.OFF_ROAD: config.off_road_penalty}.get(outcome, 0.0)
    return config.c1 * driving + config.c2 * speed_term + terminal


def compute_global_reward(individual_rewards) -> float:
    r = np.asarray(list(individual_rewards), dtype=np.float64)
    if r.size == 0:
        raise EmptyActiveSetError("global reward needs at least one active agent")
    return float(np.mean(r))


def detect_termination(collided: bool, on_road: bool, progress: float, total_length: float,
                       goal_tolerance: float) -> Status:
    """Outcome precedence: collision, then off-road, then success."""
    if collided:
        return Status.COLLIDED
    if not on_road:
        return Status.OFF_ROAD
    if progress >= total_length - goal_tolerance:
        return Status.SUCCEEDED
    return Status.ACTIVE


@dataclass
class StepResult:
    obs: dict
    states: dict
    reward_individual: dict
    reward_global: float
    done: dict
    status: dict
    active: list
    respawned: dict
    life_ids: dict
    truncated: bool = False


def life_id(agent: int, life: int) -> str:
    return f"{agent}-{life}"


class DrivingEnv:
    """Dec-POMDP driving environment; agents are integer slots ``0..n_agents-1``."""

    def __init__(self, config: EnvConfig, scenario_map: ScenarioMap | None = None):
        config.validate()
        self.config = config
        self.map = scenario_map or build_scenario(config.scenario, config.geometry)
        self.vehicles: dict[int, VehicleState] = {}
        self.awaiting: set = set()
        self.lives: dict[int, int] = {}
        self.t = 0
        self.rng = np.random.default_rng(config.seed)
        self.trace: list | None = None

    # -- spawning --------------------------------------------------------------
    def _clear(self, position, heading, others) -> bool:
        vp, gap = self.config.vehicle, self.config.spawn_gap
        mine = footprint(position, heading, vp.length + 2 * gap, vp.width + gap)
        reach = vp.length + 2 * gap + vp.width
        for v in others:
            if np.linalg.norm(position - v.position) < reach and rectangles_overlap(
                    mine, footprint(v.position, v.heading, vp.length + 2 * gap, vp.width + gap)):
                return False
        return True

    def _spawn(self, life: int) -> VehicleState | None:
        roads = self.map.spawn_roads
        for _ in range(self.config.spawn_retries):
            road = roads[int(self.rng.integers(len(roads)))]
            route = sample_route(self.map, road.id, self.rng)
            pos = route.waypoints[0].copy()
            heading = route.tangent_at(0.0)
            if self._clear(pos, heading, self.vehicles.values()):
                return VehicleState(position=pos, heading=heading, speed=self.config.spawn_speed,
                                    steering_angle=0.0, route=route, progress=0.0, life=life)
        return None

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.vehicles, self.awaiting, self.lives, self.t = {}, set(), {}, 0
        for i in range(self.config.n_agents):
            v = self._spawn(0)
            if v is None:
                raise SpawnCongestionError(
                    f"could not place vehicle {i} of {self.config.n_agents} without overlap")
            self.vehicles[i] = v
            self.lives[i] = 0
        if self.trace is not None:
            self.trace = []
        ids = self.active_ids
        return {i: self.observe(i) for i in ids}, {i: self.local_state(i) for i in ids}

    def place(self, agent: int, vehicle: VehicleState) -> None:
        """Put a vehicle into a slot directly (used for scripted scenarios and tests)."""
        self.vehicles[agent] = vehicle
        self.lives.setdefault(agent, vehicle.life)
        self.awaiting.discard(agent)

    @property
    def active_ids(self) -> list:
        return sorted(i for i, v in self.vehicles.items() if v.status is Status.ACTIVE)

    # -- observation -----------------------------------------------------------
    def _footprint(self, v: VehicleState) -> np.ndarray:
        return footprint(v.position, v.heading, self.config.vehicle.length, self.config.vehicle.width)

    def observe(self, agent: int, collided: bool = False) -> np.ndarray:
        cfg, vp = self.config, self.config.vehicle
        v = self.vehicles[agent]
        reach = cfg.lidar_range + vp.length
        others = [self._footprint(o) for j, o in self.vehicles.items()
                  if j != agent and o.status is Status.ACTIVE and np.linalg.norm(o.position - v.position) < reach]
        lidar = raycast_lidar(v.position, v.heading, others, self.map, cfg.lidar_rays, cfg.lidar_range)
        tangent = v.route.tangent_at(v.progress)
        rel_heading = np.array([v.heading @ tangent, tangent[0] * v.heading[1] - tangent[1] * v.heading[0]])
        vel = to_ego_frame(v.velocity, v.heading) / vp.v_max
        ref = v.route.point_at(v.progress)
        lateral = (tangent[0] * (v.position[1] - ref[1]) - tangent[1] * (v.position[0] - ref[0]))
        lateral = float(np.clip(lateral / cfg.geometry.lane_width, -3.0, 3.0))
        normal = np.array([-v.heading[1], v.heading[0]])
        side = cast_rays(v.position, np.stack([normal, -normal]), self.map.boundary, None, cfg.boundary_range)
        cps = to_ego_frame(upcoming_checkpoints(v.route, v.progress) - v.position, v.heading)
        cps = np.clip(cps / cfg.lidar_range, -1.0, 1.0).ravel()
        frac = v.progress / v.route.total_length
        max_yaw = vp.v_max * np.tan(vp.max_steer) / vp.wheelbase
        ego = np.concatenate([
            [v.steering_angle / vp.max_steer],
            rel_heading,
            vel,
            [v.speed / vp.v_max],
            [lateral],
            side / cfg.boundary_range,
            v.last_action,
            cps,
            [frac, 1.0 - frac],
            [v.yaw_rate / max_yaw],
            [1.0 if collided else 0.0],
        ])
        return np.concatenate([ego, lidar])

    def local_state(self, agent: int) -> np.ndarray:
        """Privileged 10-dim state: position, heading, velocity, two checkpoint vectors (world frame)."""
        cfg = self.config
        v = self.vehicles[agent]
        cps = (upcoming_checkpoints(v.route, v.progress) - v.position) / cfg.lidar_range
        return np.concatenate([v.position / cfg.position_scale, v.heading, v.velocity / cfg.vehicle.v_max,
                               cps.ravel()])

    # -- stepping ----------------------------------------------------------------
    def _collisions(self, ids: list) -> set:
        prints = {i: self._footprint(self.vehicles[i]) for i in ids}
        diag = np.hypot(self.config.vehicle.length, self.config.vehicle.width)
        hit = set()
        for a_idx, i in enumerate(ids):
            for j in ids[a_idx + 1:]:
                if np.linalg.norm(self.vehicles[i].position - self.vehicles[j].position) > diag:
                    continue
                if rectangles_overlap(prints[i], prints[j]):
                    hit.update((i, j))
        return hit

    def step(self, actions: dict) -> StepResult:
        cfg = self.config
        ids = self.active_ids
        missing = [i for i in ids if i not in actions]
        if missing:
            raise MissingActionError(f"no action for active agents {missing}")
        prev = {i: self.vehicles[i].progress for i in ids}
        for i in ids:
            v = apply_dynamics(self.vehicles[i], actions[i], cfg.dt, cfg.vehicle)
            lookahead = 2.0 * cfg.vehicle.v_max * cfg.dt + 5.0
            d = project_to_route(v.route, v.position, v.progress - 2.0, v.progress + lookahead)
            self.vehicles[i] = replace(v, progress=float(np.clip(d, 0.0, v.route.total_length)))
        crashed = self._collisions(ids)
        on_road = self.map.contains(np.array([self.vehicles[i].position for i in ids])) if ids else []
        status, r_ind = {}, {}
        for k, i in enumerate(ids):
            v = self.vehicles[i]
            status[i] = detect_termination(i in crashed, bool(on_road[k]), v.progress, v.route.total_length,
                                           cfg.goal_tolerance)
            r_ind[i] = compute_individual_reward(prev[i], v.progress, v.speed, status[i], cfg)
        r_glob = compute_global_reward(r_ind.values()) if ids else 0.0
        done = {i: int(status[i] is not Status.ACTIVE) for i in ids}
        lives = {i: life_id(i, self.vehicles[i].life) for i in ids}

        obs, states = {}, {}
        finished = [i for i in ids if done[i]]
        for i in finished:
            obs[i] = self.observe(i, collided=status[i] is Status.COLLIDED)
            states[i] = self.local_state(i)
        if self.trace is not None:
            self._record(ids, actions, r_ind, r_glob, status)
        for i in finished:
            self.vehicles[i] = replace(self.vehicles[i], status=status[i])
            if cfg.respawn:
                del self.vehicles[i]
                self.lives[i] += 1
                self.awaiting.add(i)
        respawned = {}
        for i in sorted(self.awaiting):
            v = self._spawn(self.lives[i])
            if v is None:
                continue
            self.vehicles[i] = v
            self.awaiting.discard(i)
            respawned[i] = None
        for i in ids:
            if not done[i]:
                obs[i] = self.observe(i)
                states[i] = self.local_state(i)
        for i in respawned:
            respawned[i] = (self.observe(i), self.local_state(i))
        self.t += 1
        return StepResult(obs, states, r_ind, r_glob, done, status, ids, respawned, lives,
                          truncated=self.t >= cfg.horizon)

    # -- traces ------------------------------------------------------------------
    TRACE_COLUMNS = ("step", "agent_life_id", "x", "y", "heading", "speed", "action0", "action1",
                     "r_individual", "r_global", "status")

    def enable_trace(self) -> None:
        self.trace = []

    def _record(self, ids, actions, r_ind, r_glob, status) -> None:
        for i in ids:
            v = self.vehicles[i]
            a = np.clip(np.asarray(actions[i], dtype=np.float64), -1, 1)
            self.trace.append((self.t, life_id(i, v.life), v.position[0], v.position[1], v.yaw, v.speed,
                               a[0], a[1], r_ind[i], r_glob, status[i].value))


def write_trace_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DrivingEnv.TRACE_COLUMNS)
        for row in rows:
            w.writerow([row[0], row[1], *(f"{x:.6f}" for x in row[2:10]), row[10]])
