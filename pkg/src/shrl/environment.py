"""Multi-agent highway episodes: spawning, ticking, collisions and rewards."""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import GoalTarget, GoalTracker, VehicleParams, VehicleState, step_bicycle
from .geometry import LaneMap, RoadParams, RoadType, build_quad_hash, generate_road, lookup_quad, nqc_to_global
from .perception import Observation, PerceptionConfig, build_observation, shoulder_segments


class Status(str, enum.Enum):
    ACTIVE = "Active"
    STUCK = "Stuck"
    DESPAWNED = "Despawned"


class Cause(str, enum.Enum):
    GOAL = "Goal"
    COLLISION = "Collision"
    NONE = "None"


class GoalKind(str, enum.Enum):
    RANDOM_LANE_END = "RandomLaneEnd"
    ALL_LANES_END = "AllLanesEnd"


@dataclass(frozen=True)
class GoalRegion:
    left: float
    right: float
    top: float
    bottom: float
    kind: GoalKind = GoalKind.ALL_LANES_END

    def __post_init__(self):
        if not (self.left < self.right and self.bottom < self.top):
            raise ValueError("goal box must satisfy left < right and bottom < top")

    def contains(self, p) -> bool:
        return self.left <= p[0] <= self.right and self.bottom <= p[1] <= self.top

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.left, self.right, self.top, self.bottom


@dataclass(frozen=True)
class RewardConfig:
    c_pro: float = 0.001
    c_max: float = -0.01
    c_min: float = -0.005
    l_max: float = 30.0
    l_min: float = 5.0

    def validate(self):
        if not 0 < self.c_pro < 1:
            raise ValueError("c_pro must lie in (0, 1)")
        if not -1 < self.c_max < -self.c_pro:
            raise ValueError("c_max must lie in (-1, -c_pro)")
        if not -1 < self.c_min < 0:
            raise ValueError("c_min must lie in (-1, 0)")
        if not self.l_min < self.l_max:
            raise ValueError("l_min must be below l_max")


def step_reward(v_quad: float, cfg: RewardConfig) -> float:
    """Per-step progression reward with both speed-limit penalties."""
    return (cfg.c_pro * v_quad
            + cfg.c_max * max(v_quad - cfg.l_max, 0.0)
            + cfg.c_min * max(cfg.l_min - v_quad, 0.0))


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    terminal: bool = False
    cause: Cause = Cause.NONE
    truncated: bool = False
    v_quad: float = 0.0

    def __post_init__(self):
        if self.terminal and self.cause is Cause.NONE:
            raise ValueError("terminal outcome needs a cause")


@dataclass(frozen=True)
class SpawnConfig:
    p_spawn: float = 0.05
    v_init: float = 10.0
    max_agents: int = 8

    def validate(self):
        if not 0 <= self.p_spawn <= 1:
            raise ValueError("p_spawn must lie in [0, 1]")


@dataclass(frozen=True)
class EnvConfig:
    road_type: RoadType = RoadType.STRAIGHT_FOUR
    road: RoadParams = field(default_factory=RoadParams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    goal_kind: GoalKind = GoalKind.ALL_LANES_END
    goal_depth: float = 20.0
    dt: float = 0.1
    stuck_delay: int = 50
    max_episode_ticks: int = 3000
    control_speed_limits: tuple[float, float] = (5.0, 30.0)
    seed: int = 0


@dataclass
class VehicleRecord:
    state: VehicleState
    status: Status = Status.ACTIVE
    stuck_remaining: int = 0
    goal: GoalRegion | None = None
    tracker: GoalTracker = field(default_factory=GoalTracker)
    age: int = 0


def goal_region(lane_map: LaneMap, lanes: list[int], depth: float, kind: GoalKind) -> GoalRegion:
    """Axis-aligned box covering ``depth`` metres past the end of ``lanes``."""
    pts = []
    for ln in lanes:
        last = lane_map.lanes[ln][-1]
        fwd = lane_map.direction(ln, len(lane_map.lanes[ln]) - 1)
        for c in (last.fl, last.fr):
            c = np.asarray(c)
            pts.extend([c, c + depth * fwd])
    pts = np.array(pts)
    return GoalRegion(float(pts[:, 0].min()), float(pts[:, 0].max()), float(pts[:, 1].max()),
                      float(pts[:, 1].min()), kind)


# ---------------------------------------------------------------- collisions

def _axes(corners: np.ndarray) -> np.ndarray:
    fl, fr, rl, _ = corners
    a = np.array([fl - rl, fl - fr])
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two rectangles (corners ``(4, 2)``)."""
    for axis in np.concatenate([_axes(a), _axes(b)]):
        pa, pb = a @ axis, b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    """Vectorized proper-or-touching segment intersection of ``p`` segments
    ``(m, 2)`` against a single segment ``q1-q2``."""
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0)


def rectangle_hits_polyline(corners: np.ndarray, segments: np.ndarray) -> bool:
    fl, fr, rl, rr = corners
    for q1, q2 in ((fl, fr), (fr, rr), (rr, rl), (rl, fl)):
        if np.any(_segments_cross(segments[:, 0], segments[:, 1], q1, q2)):
            return True
    return False


def detect_collisions(world: "World") -> list[tuple[int, str]]:
    """Active vehicles overlapping another non-despawned vehicle or a shoulder."""
    vehicles = world.visible_vehicles()
    ids = sorted(vehicles)
    corners = {i: vehicles[i].corners() for i in ids}
    centers = {i: vehicles[i].position for i in ids}
    reach = vehicles[ids[0]].params.length if ids else 0.0
    hits: dict[int, str] = {}
    for n, i in enumerate(ids):
        for j in ids[n + 1:]:
            if np.linalg.norm(centers[i] - centers[j]) > 2 * reach:
                continue
            if rectangles_overlap(corners[i], corners[j]):
                for k in (i, j):
                    if world.vehicles[k].status is Status.ACTIVE:
                        hits.setdefault(k, "vehicle")
    segs = world.shoulder_segs
    for i in ids:
        if i in hits or world.vehicles[i].status is not Status.ACTIVE:
            continue
        near = np.min(np.linalg.norm(segs - centers[i], axis=2), axis=1) < reach + world.max_seg_len
        if np.any(near) and rectangle_hits_polyline(corners[i], segs[near]):
            hits[i] = "shoulder"
    return sorted(hits.items())


# ---------------------------------------------------------------- world

class World:
    """Mutable simulation state.  ``step`` is the only writer."""

    def __init__(self, cfg: EnvConfig, lane_map: LaneMap | None = None):
        cfg.reward.validate()
        cfg.spawn.validate()
        self.cfg = cfg
        self.lane_map = lane_map or generate_road(cfg.road_type, cfg.road)
        self.qhash = build_quad_hash(self.lane_map)
        self.shoulder_segs = shoulder_segments(self.lane_map)
        self.max_seg_len = float(np.max(np.linalg.norm(self.shoulder_segs[:, 1] - self.shoulder_segs[:, 0], axis=1)))
        self.vehicles: dict[int, VehicleRecord] = {}
        self.tick = 0
        self.next_id = 0
        self.pending_spawns = 0
        ss = np.random.SeedSequence(cfg.seed)
        spawn_ss, goal_ss = ss.spawn(2)
        self.spawn_rng = np.random.default_rng(spawn_ss)
        self.goal_rng = np.random.default_rng(goal_ss)
        self.cache: dict = {}
        self.last_states: dict[int, VehicleState] = {}

    # perception protocol
    def visible_vehicles(self) -> dict[int, VehicleState]:
        vis = self.cache.get("visible")
        if vis is None:
            vis = {i: r.state for i, r in self.vehicles.items() if r.status is not Status.DESPAWNED}
            self.cache["visible"] = vis
        return vis

    def locate(self, p):
        return lookup_quad(self.qhash, p)

    def active_ids(self) -> list[int]:
        return sorted(i for i, r in self.vehicles.items() if r.status is Status.ACTIVE)

    def observe(self, vid: int) -> Observation:
        rec = self.vehicles[vid]
        return build_observation(self, vid, rec.goal.as_tuple(), self.cfg.perception)

    # --------------------------------------------------------------- spawning
    def spawn_state(self, lane: int) -> VehicleState:
        lm = self.lane_map
        p = self.cfg.vehicle
        s = 0.5 * p.length + 0.5
        q, v = lm.at_station(lane, s)
        pos = nqc_to_global(lm.quad(lane, q), 0.5, v)
        d = lm.direction(lane, q)
        return VehicleState(float(pos[0]), float(pos[1]), math.atan2(d[1], d[0]), self.cfg.spawn.v_init, p)

    def slot_free(self, state: VehicleState) -> bool:
        c = state.corners()
        return not any(rectangles_overlap(c, s.corners()) for s in self.visible_vehicles().values())

    def add_vehicle(self, state: VehicleState, goal: GoalRegion | None = None) -> int:
        vid = self.next_id
        self.next_id += 1
        goal = goal or self.draw_goal()
        self.vehicles[vid] = VehicleRecord(state, goal=goal,
                                           tracker=GoalTracker(speed_limits=self.cfg.control_speed_limits))
        return vid

    def draw_goal(self) -> GoalRegion:
        lm = self.lane_map
        if self.cfg.goal_kind is GoalKind.ALL_LANES_END:
            return goal_region(lm, list(range(lm.n_lanes)), self.cfg.goal_depth, GoalKind.ALL_LANES_END)
        lane = int(self.goal_rng.integers(lm.n_lanes))
        return goal_region(lm, [lane], self.cfg.goal_depth, GoalKind.RANDOM_LANE_END)

    def spawn_agents(self) -> list[int]:
        """Bernoulli spawn request per tick; requests wait while the drawn
        slot is occupied or the agent cap is reached."""
        sc = self.cfg.spawn
        if sc.p_spawn > 0 and self.spawn_rng.random() < sc.p_spawn:
            self.pending_spawns += 1
        born = []
        if self.pending_spawns and len(self.active_ids()) < sc.max_agents:
            lane = int(self.spawn_rng.integers(self.lane_map.n_lanes))
            state = self.spawn_state(lane)
            if self.slot_free(state):
                born.append(self.add_vehicle(state))
                self.pending_spawns -= 1
        return born

    # --------------------------------------------------------------- rewards
    def v_quad(self, state: VehicleState):
        loc = self.locate(state.position)
        if loc is None:
            return None
        return float(np.dot(state.velocity, self.lane_map.direction(loc[0], loc[1])))

    def compute_reward(self, vid: int, collided: bool) -> StepOutcome:
        rec = self.vehicles[vid]
        pos = rec.state.position
        if collided:
            return StepOutcome(-1.0, True, Cause.COLLISION)
        if rec.goal is not None and rec.goal.contains(pos):
            return StepOutcome(1.0, True, Cause.GOAL)
        vq = self.v_quad(rec.state)
        if vq is None:
            return StepOutcome(-1.0, True, Cause.COLLISION)
        return StepOutcome(step_reward(vq, self.cfg.reward), v_quad=vq)

    # --------------------------------------------------------------- ticking
    def step(self, actions: dict[int, GoalTarget], observe: bool = True):
        """Advance one tick.

        Returns ``(outcomes, observations, born)``.  ``outcomes`` covers every
        agent active before the tick; ``observations`` covers surviving and
        newly spawned agents plus agents truncated by the episode limit.
        """
        active = self.active_ids()
        unknown = set(actions) - set(active)
        if unknown:
            raise KeyError(f"actions for unknown or inactive agents: {sorted(unknown)}")
        missing = set(active) - set(actions)
        if missing:
            raise KeyError(f"missing actions for agents: {sorted(missing)}")

        dt = self.cfg.dt
        for vid in sorted(self.vehicles):
            rec = self.vehicles[vid]
            if rec.status is Status.ACTIVE:
                cmd = rec.tracker.command(rec.state, actions[vid], dt)
                rec.state = step_bicycle(rec.state, cmd, dt)
                rec.age += 1
            elif rec.status is Status.STUCK:
                rec.stuck_remaining -= 1
                if rec.stuck_remaining <= 0:
                    rec.status = Status.DESPAWNED
        self.vehicles = {i: r for i, r in self.vehicles.items() if r.status is not Status.DESPAWNED}
        self.last_states = {vid: self.vehicles[vid].state for vid in active}
        self.tick += 1
        self.cache = {}

        collided = {vid for vid, _ in detect_collisions(self)}
        outcomes: dict[int, StepOutcome] = {}
        for vid in active:
            out = self.compute_reward(vid, vid in collided)
            if not out.terminal and self.vehicles[vid].age >= self.cfg.max_episode_ticks:
                out = replace(out, truncated=True)
            outcomes[vid] = out
        truncated = []
        for vid, out in outcomes.items():
            rec = self.vehicles[vid]
            if out.cause is Cause.COLLISION:
                rec.status = Status.STUCK
                rec.stuck_remaining = self.cfg.stuck_delay
            elif out.cause is Cause.GOAL:
                rec.status = Status.DESPAWNED
            elif out.truncated:
                truncated.append(vid)
        self.cache = {}

        born = self.spawn_agents()
        self.cache = {}
        observations = {}
        if observe:
            for vid in self.active_ids():
                observations[vid] = self.observe(vid)
        for vid in truncated:
            self.vehicles[vid].status = Status.DESPAWNED
        self.vehicles = {i: r for i, r in self.vehicles.items() if r.status is not Status.DESPAWNED}
        self.cache = {}
        return outcomes, observations, born


# ---------------------------------------------------------------- trajectory log

TRAJECTORY_FIELDS = ["tick", "id", "x", "y", "psi", "speed", "v_quad", "reward", "cause"]


class TrajectoryLog:
    """Comma-separated per-agent-per-tick records."""

    def __init__(self, road_type: RoadType | None = None):
        self.rows: list[tuple] = []
        self.road_type = road_type

    def record(self, world: World, outcomes: dict[int, StepOutcome]):
        for vid, out in sorted(outcomes.items()):
            s = world.last_states[vid]
            self.rows.append((world.tick, vid, s.x, s.y, s.psi, s.speed, out.v_quad, out.reward, out.cause.value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.road_type is not None:
            buf.write(f"# road_type={RoadType(self.road_type).value}\n")
        buf.write(",".join(TRAJECTORY_FIELDS) + "\n")
        for row in self.rows:
            buf.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
        return buf.getvalue()
