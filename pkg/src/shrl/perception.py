"""Observation building: vehicle features, range rays, inter-vehicle regions
(IVRs) and the candidate high-level commands.

An IVR is a collision-free stretch of one lane between two along-lane
stations, bordered by other vehicles or by the ends of the view window.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import VehicleState
from .geometry import LaneMap, QuadHash, PointOutsideQuad, _contains_scalar, global_to_nqc


class PerceptionError(RuntimeError):
    pass


class BehaviorMode(enum.IntEnum):
    STAY_CURRENT = 0
    MANEUVER_OTHER_IN_LANE = 1
    PAY_MIND_LEFT = 2
    MANEUVER_LEFT = 3
    PAY_MIND_RIGHT = 4
    MANEUVER_RIGHT = 5


OUTLINE_IS_CURRENT = frozenset({BehaviorMode.STAY_CURRENT, BehaviorMode.PAY_MIND_LEFT, BehaviorMode.PAY_MIND_RIGHT})


@dataclass(frozen=True)
class PerceptionConfig:
    n_samples: int = 8
    view_ahead: float = 100.0
    view_behind: float = 30.0
    n_rays: int = 25
    fan_deg: float = 120.0
    d_max: float = 1000.0
    allow_in_lane_maneuver: bool = True
    min_candidate_length: float = 2.0


@dataclass(frozen=True)
class VehicleFeature:
    p_fl: tuple[float, float]
    p_fr: tuple[float, float]
    p_rl: tuple[float, float]
    p_rr: tuple[float, float]
    v: tuple[float, float]
    psi: float

    @classmethod
    def from_state(cls, s: VehicleState) -> "VehicleFeature":
        fl, fr, rl, rr = (tuple(map(float, c)) for c in s.corners())
        vel = s.velocity
        return cls(fl, fr, rl, rr, (float(vel[0]), float(vel[1])), float(s.psi))

    def as_array(self) -> np.ndarray:
        return np.array([*self.p_fl, *self.p_fr, *self.p_rl, *self.p_rr, *self.v, self.psi])


@dataclass(frozen=True)
class RangeScan:
    r0: tuple[float, float]
    ends: np.ndarray  # (N, 2)

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.ends - np.asarray(self.r0), axis=1)


@dataclass(eq=False)
class InterVehicleRegion:
    lane: int
    s_rear: float
    s_front: float
    rear: tuple[int, float]
    front: tuple[int, float]
    samples: np.ndarray  # (N+1, 2, 2): per station (left point, right point)
    length: float
    widths: np.ndarray  # (N,)
    rear_occupant: int | None = None
    front_occupant: int | None = None
    v_rear: float = 0.0
    v_front: float = 0.0

    @property
    def key(self) -> tuple[int, float, float]:
        return self.lane, self.s_rear, self.s_front

    def contains_station(self, s: float) -> bool:
        return self.s_rear <= s <= self.s_front

    def polygon(self) -> np.ndarray:
        """Outline polygon, counter-clockwise: right side forward, left side back."""
        return np.concatenate([self.samples[:, 1], self.samples[::-1, 0]])

    def centerline(self) -> np.ndarray:
        return self.samples.mean(axis=1)

    def feature_size(self) -> int:
        return self.samples.size + 1 + self.widths.size + 2


@dataclass(frozen=True)
class Candidate:
    b: BehaviorMode
    m: InterVehicleRegion
    o: InterVehicleRegion


@dataclass
class IvrState:
    """Everything candidate enumeration needs about the lanes around ego."""

    ego_lane: int
    ego_station: float
    lanes: dict[int, list[InterVehicleRegion]]
    current: InterVehicleRegion
    left_lane: int | None = None
    right_lane: int | None = None
    neighbor_rear_station: dict[int, float] = field(default_factory=dict)
    invader_ahead: bool = False
    invader_behind: bool = False

    def neighbours_in_lane(self):
        ivrs = self.lanes[self.ego_lane]
        idx = next(i for i, r in enumerate(ivrs) if r is self.current)
        front = ivrs[idx + 1] if idx + 1 < len(ivrs) else None
        rear = ivrs[idx - 1] if idx > 0 else None
        return rear, front


@dataclass
class Observation:
    goal_box: tuple[float, float, float, float]
    ego: VehicleFeature
    surrounding: list[tuple[int, VehicleFeature]]
    scan: RangeScan
    ivr_state: IvrState
    candidates: list[Candidate]
    ego_nqc: tuple[int, int, float, float]

    @property
    def current(self) -> InterVehicleRegion:
        return self.ivr_state.current

    def to_record(self, agent_id: int, tick: int) -> dict:
        def ivr(r: InterVehicleRegion):
            return {"lane": r.lane, "s_rear": r.s_rear, "s_front": r.s_front, "length": r.length}

        return {
            "tick": tick,
            "agent": agent_id,
            "goal_box": list(self.goal_box),
            "ego": self.ego.as_array().tolist(),
            "surrounding": {str(i): f.as_array().tolist() for i, f in self.surrounding},
            "rays": self.scan.ends.tolist(),
            "current": ivr(self.current),
            "candidates": [{"b": c.b.name, "m": ivr(c.m), "o": ivr(c.o)} for c in self.candidates],
        }


def dump_observation(obs: Observation, agent_id: int, tick: int) -> str:
    """One JSON line per agent per step."""
    return json.dumps(obs.to_record(agent_id, tick), sort_keys=True)


# ---------------------------------------------------------------- rays

def ray_directions(psi: float, n: int, fan_deg: float) -> np.ndarray:
    if n % 2 != 1:
        raise ValueError("ray count must be odd")
    step = math.radians(fan_deg) / n
    k = np.arange(n) - n // 2
    ang = psi + k * step
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def cast_rays_segments(origin, psi: float, segments: np.ndarray, n: int = 25, fan_deg: float = 120.0,
                       d_max: float = 1000.0) -> RangeScan:
    """Nearest hit of each ray against ``segments`` of shape ``(m, 2, 2)``."""
    o = np.asarray(origin, dtype=float)
    dirs = ray_directions(psi, n, fan_deg)
    t_best = np.full(n, d_max)
    if len(segments):
        p = segments[:, 0]
        e = segments[:, 1] - segments[:, 0]
        w = p - o
        denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
            s = (w[None, :, 0] * dirs[:, None, 1] - w[None, :, 1] * dirs[:, None, 0]) / denom
        hit = (np.abs(denom) > 1e-12) & (t >= 0) & (s >= 0) & (s <= 1)
        t = np.where(hit, t, np.inf)
        t_best = np.minimum(t_best, t.min(axis=1))
    return RangeScan((float(o[0]), float(o[1])), o + dirs * t_best[:, None])


def rectangle_segments(corners: np.ndarray) -> np.ndarray:
    """Edges of a vehicle rectangle given corners in fl, fr, rl, rr order."""
    fl, fr, rl, rr = corners
    return np.array([[fl, fr], [fr, rr], [rr, rl], [rl, fl]])


def shoulder_segments(lane_map: LaneMap) -> np.ndarray:
    segs = [np.stack([pl[:-1], pl[1:]], axis=1) for pl in lane_map.shoulders]
    return np.concatenate(segs, axis=0)


def cast_rays(world, ego_id: int, cfg: PerceptionConfig = PerceptionConfig()) -> RangeScan:
    ego = world.visible_vehicles()[ego_id]
    segs = [shoulder_segments(world.lane_map)]
    for vid, s in world.visible_vehicles().items():
        if vid != ego_id:
            segs.append(rectangle_segments(s.corners()))
    return cast_rays_segments(ego.position, ego.psi, np.concatenate(segs), cfg.n_rays, cfg.fan_deg, cfg.d_max)


# ---------------------------------------------------------------- IVRs

def locate_all(qh: QuadHash, p) -> dict[int, tuple[int, float, float]]:
    """Every lane containing ``p``: lane -> (q, u, v), lowest quad index first."""
    x, y = float(p[0]), float(p[1])
    out: dict[int, tuple[int, float, float]] = {}
    for ln, qi in qh.candidates((x, y)):
        if ln in out:
            continue
        if _contains_scalar(qh.lane_map.edges[ln][qi], x, y):
            try:
                u, v = global_to_nqc(qh.lane_map.lanes[ln][qi], (x, y), tol=1e-7)
            except PointOutsideQuad:
                continue
            out[ln] = (qi, u, v)
    return out


@dataclass
class LaneOccupancy:
    vid: int
    s_min: float
    s_max: float
    center_in_lane: bool
    speed: float


def lane_occupancy(world) -> dict[int, list[LaneOccupancy]]:
    """Per lane, the along-lane span of every vehicle with a corner or its
    center inside that lane.  Cached per world tick."""
    cache = getattr(world, "cache", None)
    if cache is not None and "occupancy" in cache:
        return cache["occupancy"]
    lm = world.lane_map
    occ: dict[int, list[LaneOccupancy]] = {ln: [] for ln in range(lm.n_lanes)}
    for vid, s in world.visible_vehicles().items():
        stations: dict[int, list[float]] = {}
        center_lanes = set()
        pts = list(s.corners()) + [s.position]
        for k, p in enumerate(pts):
            for ln, (qi, u, v) in locate_all(world.qhash, p).items():
                stations.setdefault(ln, []).append(lm.station(ln, qi, v))
                if k == 4:
                    center_lanes.add(ln)
        for ln, st in stations.items():
            dirn = lm.direction(ln, lm.at_station(ln, st[0])[0])
            occ[ln].append(LaneOccupancy(vid, min(st), max(st), ln in center_lanes,
                                         float(np.dot(s.velocity, dirn))))
    if cache is not None:
        cache["occupancy"] = occ
    return occ


def build_ivr(lane_map: LaneMap, lane: int, s_rear: float, s_front: float, n: int,
              rear_occ: LaneOccupancy | None = None, front_occ: LaneOccupancy | None = None) -> InterVehicleRegion:
    """Sample ``n + 1`` side-point pairs at equal along-lane spacing."""
    length = s_front - s_rear
    if not length > 0:
        raise PerceptionError("IVR must have positive length")
    stations = s_rear + length * np.arange(n + 1) / n
    stations[-1] = s_front
    samples = np.stack(lane_map.side_points_batch(lane, stations), axis=1)
    widths = np.linalg.norm(samples[1:, 0] - samples[1:, 1], axis=1)
    return InterVehicleRegion(
        lane=lane, s_rear=float(s_rear), s_front=float(s_front),
        rear=lane_map.at_station(lane, s_rear), front=lane_map.at_station(lane, s_front),
        samples=samples, length=float(length), widths=widths,
        rear_occupant=rear_occ.vid if rear_occ else None, front_occupant=front_occ.vid if front_occ else None,
        v_rear=rear_occ.speed if rear_occ else 0.0, v_front=front_occ.speed if front_occ else 0.0,
    )


def lane_gaps(window: tuple[float, float], spans: list[LaneOccupancy]):
    """Free intervals of ``window`` not covered by any span.

    Returns ``(s0, s1, rear_occupant, front_occupant)`` tuples; occupants are
    the spans bordering each gap, ``None`` at the window ends.
    """
    w0, w1 = window
    inside = sorted((sp for sp in spans if sp.s_max > w0 and sp.s_min < w1), key=lambda sp: (sp.s_min, sp.vid))
    gaps = []
    cursor, rear = w0, None
    for sp in inside:
        if sp.s_min > cursor:
            gaps.append((cursor, sp.s_min, rear, sp))
        if sp.s_max >= cursor:
            cursor, rear = sp.s_max, sp
    if w1 > cursor:
        gaps.append((cursor, w1, rear, None))
    return [g for g in gaps if g[1] - g[0] > 1e-9]


def lane_ivrs(lane_map: LaneMap, lane: int, window: tuple[float, float], spans: list[LaneOccupancy],
              n: int) -> list[InterVehicleRegion]:
    return [build_ivr(lane_map, lane, s0, s1, n, r, f) for s0, s1, r, f in lane_gaps(window, spans)]


def extract_ivrs(world, ego_id: int, cfg: PerceptionConfig = PerceptionConfig()) -> IvrState:
    """IVRs of ego's lane and its existing neighbour lanes."""
    lm = world.lane_map
    ego = world.visible_vehicles()[ego_id]
    loc = world.locate(ego.position)
    if loc is None:
        raise PerceptionError(f"vehicle {ego_id} is not on any lane quad")
    lane, q, _, v = loc
    s_e = lm.station(lane, q, v)
    occ = lane_occupancy(world)
    quad = lm.quad(lane, q)

    def window(ln, s):
        return max(s - cfg.view_behind, 0.0), min(s + cfg.view_ahead, lm.lane_length(ln))

    def others(ln):
        return [o for o in occ[ln] if o.vid != ego_id]

    lanes = {lane: lane_ivrs(lm, lane, window(lane, s_e), others(lane), cfg.n_samples)}
    rear_st = {}
    sides = {}
    for side, adj in (("left", quad.left_adj), ("right", quad.right_adj)):
        if adj is None:
            continue
        ln, qi = adj
        s_n = lm.station(ln, qi, v)
        lanes[ln] = lane_ivrs(lm, ln, window(ln, s_n), others(ln), cfg.n_samples)
        rear_st[ln] = s_n - ego.params.l_r
        sides[side] = ln

    ivrs = lanes[lane]
    current = next((r for r in ivrs if r.contains_station(s_e)), None)
    if current is None:
        # ego's station is covered by another vehicle's projection
        ahead = [r for r in ivrs if r.s_rear >= s_e]
        current = ahead[0] if ahead else ivrs[-1] if ivrs else None
    if current is None:
        raise PerceptionError(f"no free region in lane {lane} around vehicle {ego_id}")
    by_vid = {o.vid: o for o in occ[lane]}
    inv_ahead = current.front_occupant is not None and not by_vid[current.front_occupant].center_in_lane
    inv_behind = current.rear_occupant is not None and not by_vid[current.rear_occupant].center_in_lane
    return IvrState(lane, s_e, lanes, current, sides.get("left"), sides.get("right"), rear_st,
                    inv_ahead, inv_behind)


def enumerate_candidates(st: IvrState, cfg: PerceptionConfig = PerceptionConfig()) -> list[Candidate]:
    """Candidate commands ``(b, m, o)`` around the current IVR.

    * stay: one candidate with outline = current IVR; it pays mind to the
      region beyond an invading vehicle if one borders the current IVR.
    * in-lane maneuver: only when an invader splits ego's lane; targets the
      region beyond it, outline = that region.
    * pay mind left/right: each IVR of the neighbour lane, outline = current.
    * maneuver left/right: neighbour IVRs whose front lies ahead of ego's rear
      axle, outline = that IVR.
    """
    c = st.current
    rear, front = st.neighbours_in_lane()
    front_split = front if st.invader_ahead else None
    rear_split = rear if st.invader_behind else None

    stay_m = front_split or rear_split or c
    out = [Candidate(BehaviorMode.STAY_CURRENT, stay_m, c)]
    if cfg.allow_in_lane_maneuver:
        for r in (front_split, rear_split):
            if r is not None and r.length >= cfg.min_candidate_length:
                out.append(Candidate(BehaviorMode.MANEUVER_OTHER_IN_LANE, r, r))
    for ln, pay, man in ((st.left_lane, BehaviorMode.PAY_MIND_LEFT, BehaviorMode.MANEUVER_LEFT),
                         (st.right_lane, BehaviorMode.PAY_MIND_RIGHT, BehaviorMode.MANEUVER_RIGHT)):
        if ln is None:
            continue
        usable = [r for r in st.lanes[ln] if r.length >= cfg.min_candidate_length]
        out.extend(Candidate(pay, r, c) for r in usable)
        out.extend(Candidate(man, r, r) for r in usable if r.s_front > st.neighbor_rear_station[ln])
    return out


def build_observation(world, ego_id: int, goal_box, cfg: PerceptionConfig = PerceptionConfig()) -> Observation:
    vehicles = world.visible_vehicles()
    ego = vehicles[ego_id]
    st = extract_ivrs(world, ego_id, cfg)
    sur = [(vid, VehicleFeature.from_state(s)) for vid, s in sorted(vehicles.items())
           if vid != ego_id and np.linalg.norm(s.position - ego.position) <= cfg.view_ahead]
    return Observation(
        goal_box=tuple(goal_box),
        ego=VehicleFeature.from_state(ego),
        surrounding=sur,
        scan=cast_rays(world, ego_id, cfg),
        ivr_state=st,
        candidates=enumerate_candidates(st, cfg),
        ego_nqc=world.locate(ego.position),
    )
