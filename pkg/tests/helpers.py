"""Test-side oracles and world builders."""

import numpy as np

from shrl.dynamics import VehicleState
from shrl.environment import EnvConfig, SpawnConfig, World
from shrl.geometry import make_quad


def winding_number(poly, p) -> int:
    """Winding number of a closed polygon around ``p`` (independent of the
    crossing-count test used inside the package)."""
    poly = np.asarray(poly, dtype=float) - np.asarray(p, dtype=float)
    ang = np.arctan2(poly[:, 1], poly[:, 0])
    d = np.diff(np.append(ang, ang[0]))
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return int(round(d.sum() / (2 * np.pi)))


def rect_polygon(corners):
    fl, fr, rl, rr = corners
    return np.array([fl, fr, rr, rl])


def random_convex_quad(rng):
    """Convex quad from four sorted angles on a jittered ellipse."""
    while True:
        ang = np.sort(rng.uniform(0, 2 * np.pi, 4))
        if np.min(np.diff(np.append(ang, ang[0] + 2 * np.pi))) < 0.15:
            continue
        r = rng.uniform(0.6, 1.8, 4)
        scale = rng.uniform(0.5, 40.0)
        stretch = np.diag(rng.uniform(0.5, 2.0, 2))
        pts = (np.column_stack([r * np.cos(ang), r * np.sin(ang)]) @ stretch) * scale
        pts = pts + rng.uniform(-1000, 1000, 2)
        try:
            return make_quad(pts[0], pts[1], pts[3], pts[2])
        except ValueError:
            continue


def place(lane: int, x: float, lane_width: float = 4.0, dy: float = 0.0, speed: float = 10.0, psi: float = 0.0):
    """Vehicle state centered in ``lane`` of a straight road at ``x``."""
    return VehicleState(x, -(lane + 0.5) * lane_width + dy, psi, speed)


def make_world(lane_map=None, states=(), **env_kwargs):
    cfg = EnvConfig(spawn=SpawnConfig(p_spawn=0.0), **env_kwargs)
    w = World(cfg, lane_map)
    ids = [w.add_vehicle(s) for s in states]
    return w, ids


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)



# ---------------------------------------------------------------- candidate truth table

LANE_W = 4.0
HALF_LEN = 2.3
HALF_WID = 0.9
L_R = 1.3
VIEW_BEHIND, VIEW_AHEAD = 30.0, 100.0
MIN_LEN = 2.0


def lanes_touched(lane: int, dy: float, n_lanes: int):
    """Lanes holding a corner or the center of an axis-aligned vehicle."""
    yc = -(lane + 0.5) * LANE_W + dy
    ys = [yc, yc + HALF_WID, yc - HALF_WID]
    out = set()
    for y in ys:
        for ln in range(n_lanes):
            if -(ln + 1) * LANE_W <= y <= -ln * LANE_W:
                out.add(ln)
    return out


def expected_candidates(n_lanes: int, road_len: float, ego_lane: int, s_e: float, others):
    """Candidate multiset by the behavior-table rules, from analytic spans.

    ``others`` lists ``(lane, station, dy)`` for every other vehicle.
    Regions are ``(lane, s_rear, s_front)`` rounded to 6 decimals.
    """
    spans = {ln: [] for ln in range(n_lanes)}
    for k, (lane, s, dy) in enumerate(others):
        for ln in lanes_touched(lane, dy, n_lanes):
            spans[ln].append((s - HALF_LEN, s + HALF_LEN, k, ln == lane))

    def gaps(ln):
        w0, w1 = max(s_e - VIEW_BEHIND, 0.0), min(s_e + VIEW_AHEAD, road_len)
        cur, rear, out = w0, None, []
        for a, b, k, own in sorted(sp for sp in spans[ln] if sp[1] > w0 and sp[0] < w1):
            if a > cur:
                out.append((cur, a, rear, (k, own)))
            if b >= cur:
                cur, rear = b, (k, own)
        if w1 > cur:
            out.append((cur, w1, rear, None))
        return [g for g in out if g[1] - g[0] > 1e-9]

    def key(ln, g):
        return (ln, round(g[0], 6), round(g[1], 6))

    own = gaps(ego_lane)
    ci = next(i for i, g in enumerate(own) if g[0] <= s_e <= g[1])
    cur = own[ci]
    c = key(ego_lane, cur)
    front = own[ci + 1] if ci + 1 < len(own) else None
    rear = own[ci - 1] if ci > 0 else None
    inv_ahead = cur[3] is not None and not cur[3][1]
    inv_behind = cur[2] is not None and not cur[2][1]
    fs = front if inv_ahead else None
    rs = rear if inv_behind else None
    stay_m = key(ego_lane, fs) if fs else key(ego_lane, rs) if rs else c
    out = [(0, stay_m, c)]
    for r in (fs, rs):
        if r is not None and r[1] - r[0] >= MIN_LEN:
            out.append((1, key(ego_lane, r), key(ego_lane, r)))
    for ln, pay, man in ((ego_lane - 1, 2, 3), (ego_lane + 1, 4, 5)):
        if not 0 <= ln < n_lanes:
            continue
        for g in gaps(ln):
            if g[1] - g[0] < MIN_LEN:
                continue
            out.append((pay, key(ln, g), c))
            if g[1] > s_e - L_R:
                out.append((man, key(ln, g), key(ln, g)))
    return sorted(out)


def observed_candidates(obs):
    def key(r):
        return (r.lane, round(r.s_rear, 6), round(r.s_front, 6))
    return sorted((int(c.b), key(c.m), key(c.o)) for c in obs.candidates)


def truth_table_scenarios(n_lanes: int = 3, s_e: float = 100.0):
    """Every ego lane with 0..2 aligned vehicles per lane on fixed slots, plus
    invading neighbours straddling into ego's lane."""
    import itertools
    slots = [-25.0, -8.0, 12.0, 99.0]
    per_lane = [()] + [(a,) for a in slots] + list(itertools.combinations(slots, 2))
    for ego_lane in range(n_lanes):
        for combo in itertools.product(per_lane, repeat=n_lanes):
            others = [(ln, s_e + d, 0.0) for ln, ds in enumerate(combo) for d in ds]
            yield ego_lane, others
    for ego_lane in range(n_lanes):
        for side, dy in ((-1, -1.5), (1, 1.5)):
            ln = ego_lane + side
            if not 0 <= ln < n_lanes:
                continue
            for d_inv in (-8.0, 12.0, 60.0):
                for own in ((), (40.0,), (-25.0, 99.0)):
                    others = [(ln, s_e + d_inv, dy)] + [(ego_lane, s_e + d, 0.0) for d in own]
                    yield ego_lane, others


# ---------------------------------------------------------------- finite differences

def fd_worst_error(f, params: dict, rng, n_coords: int = 30, h: float = 1e-5, floor: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients of the scalar ``f()`` on randomly chosen coordinates.

    ``floor`` bounds the denominator so that components near zero, where the
    difference quotient is dominated by roundoff, are compared absolutely."""
    from shrl.autodiff import no_grad

    for p in params.values():
        p.grad = None
    f().backward()
    names = sorted(params)
    worst = 0.0
    for _ in range(n_coords):
        p = params[names[int(rng.integers(len(names)))]]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = float(p.data[idx])
        with no_grad():
            p.data[idx] = old + h
            up = float(f().data)
            p.data[idx] = old - h
            dn = float(f().data)
        p.data[idx] = old
        num = (up - dn) / (2 * h)
        ana = 0.0 if p.grad is None else float(p.grad[idx])
        worst = max(worst, abs(num - ana) / max(floor, abs(num) + abs(ana)))
    return worst
