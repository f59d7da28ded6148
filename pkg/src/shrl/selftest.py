"""Quick oracle suites behind ``shrl selftest``.

Reduced-size versions of the checks in the test suite; each oracle is
computed independently of the code under test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .dynamics import GoalTarget, GoalTracker, VehicleState, step_bicycle
from .geometry import (RoadType, build_quad_hash, generate_road, global_to_nqc, lookup_quad, make_quad,
                       nqc_to_global, scan_quad)
from .perception import InterVehicleRegion
from .policy_net import CandidateFeatures, NetConfig, SHRLNet, StateFeatures, actor_sample, transform_goal
from .trainer import compute_returns


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def random_convex_quad(rng: np.random.Generator):
    """Four points on a jittered circle, in counter-clockwise order."""
    while True:
        ang = np.sort(rng.uniform(0, 2 * np.pi, 4))
        r = rng.uniform(0.5, 2.0, 4)
        pts = np.column_stack([r * np.cos(ang), r * np.sin(ang)]) * rng.uniform(1, 50) + rng.uniform(-500, 500, 2)
        try:
            # ccw order rl, rr, fr, fl
            return make_quad(pts[0], pts[1], pts[3], pts[2])
        except Exception:
            continue


def point_in_polygon(poly: np.ndarray, p) -> bool:
    """Even-odd crossing test."""
    x, y = p
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xc > x:
                inside = not inside
    return inside


def check_nqc_roundtrip(rng, n_quads=500, n_points=20) -> CheckResult:
    worst = 0.0
    for _ in range(n_quads):
        q = random_convex_quad(rng)
        for u, v in rng.uniform(0, 1, (n_points, 2)):
            p = nqc_to_global(q, u, v)
            u2, v2 = global_to_nqc(q, p)
            worst = max(worst, float(np.linalg.norm(nqc_to_global(q, u2, v2) - p)), abs(u - u2), abs(v - v2))
    return CheckResult("nqc round trip", bool(worst < 1e-9), f"max error {worst:.2e}")


def check_hash(rng, n=2000) -> CheckResult:
    bad = 0
    for rt in RoadType:
        lm = generate_road(rt)
        qh = build_quad_hash(lm)
        pts = np.concatenate([q.corners() for q in lm.all_quads()])
        lo, hi = pts.min(axis=0) - 5, pts.max(axis=0) + 5
        for p in rng.uniform(lo, hi, (n, 2)):
            bad += lookup_quad(qh, p) != scan_quad(lm, p)
    return CheckResult("quad hash vs scan", bad == 0, f"{bad} mismatches over {3 * n} queries")


def check_gradients(rng, n_params=40) -> CheckResult:
    cfg = NetConfig(embed=8, d=8, heads=2, ff=8, hidden=8)
    net = SHRLNet(cfg, seed=int(rng.integers(1 << 30)))
    state = StateFeatures(rng.normal(size=4), rng.normal(size=11), rng.normal(size=(3, 11)),
                          rng.normal(size=cfg.ray_dim), rng.normal(size=cfg.ivr_dim))
    cand = CandidateFeatures(rng.normal(size=cfg.ivr_dim), 2, 1.5, rng.uniform(0.5, 2, cfg.n_samples))

    def f():
        e = net.encode([state], [cand])
        v1, v2 = net.values(e)
        mu = net.actor_mean(e, [cand])
        return (v1 * 0.7 + v2 * 0.3).sum() + (mu * mu).sum()

    params = net.parameters()
    for p in params.values():
        p.grad = None
    f().backward()
    worst = 0.0
    names = sorted(params)
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = p.data[idx]
        h = 1e-6
        with no_grad():
            p.data[idx] = old + h
            up = float(f().data)
            p.data[idx] = old - h
            dn = float(f().data)
        p.data[idx] = old
        num = (up - dn) / (2 * h)
        ana = float(p.grad[idx]) if p.grad is not None else 0.0
        worst = max(worst, abs(num - ana) / max(1e-6, abs(num) + abs(ana)))
    return CheckResult("network gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def check_returns(rng) -> CheckResult:
    worst = 0.0
    for _ in range(50):
        r = rng.normal(size=int(rng.integers(1, 40)))
        term = bool(rng.integers(2))
        boot = float(rng.normal())
        g = compute_returns(r, term, None if term else boot, 0.97)
        nxt = np.append(g[1:], 0.0 if term else boot)
        worst = max(worst, float(np.max(np.abs(g - (r + 0.97 * nxt)))))
    return CheckResult("return recursion", worst < 1e-12, f"max residual {worst:.2e}")


def random_outline(rng, n=8) -> InterVehicleRegion:
    length = rng.uniform(5, 60)
    width = rng.uniform(2.5, 5)
    theta = rng.uniform(-np.pi, np.pi)
    curv = rng.uniform(-1 / 150, 1 / 150)
    s = np.linspace(0, length, n + 1)
    ang = theta + curv * s
    d = np.column_stack([np.cos(ang), np.sin(ang)])
    center = np.cumsum(np.vstack([[0, 0], d[:-1] * np.diff(s)[:, None]]), axis=0) + rng.uniform(-300, 300, 2)
    normal = np.column_stack([-d[:, 1], d[:, 0]])
    left, right = center + 0.5 * width * normal, center - 0.5 * width * normal
    samples = np.stack([left, right], axis=1)
    widths = np.linalg.norm(left - right, axis=1)[1:]
    return InterVehicleRegion(0, 0.0, length, (0, 0.0), (0, 1.0), samples, float(length), widths)


def check_confinement(rng, n=2000) -> CheckResult:
    out = 0
    for _ in range(n):
        o = random_outline(rng)
        a, _, _ = actor_sample(rng.normal(0, 3, 2), np.array([0.5, 0.5]), 1.0, rng)
        g, _ = transform_goal(a, o)
        poly = np.vstack([o.samples[:, 0], o.samples[::-1, 1]])
        out += not point_in_polygon(poly, g)
    return CheckResult("goal confinement", out == 0, f"{out} of {n} goals outside the outline")


def check_controller(rng, trials=20) -> CheckResult:
    lane_width = 4.0
    y_c = -1.5 * lane_width  # center of lane 1
    fails = 0
    for _ in range(trials):
        off = 1.6 * (1 if rng.random() < 0.5 else -1)
        st = VehicleState(rng.uniform(20, 60), y_c + off, rng.uniform(-0.05, 0.05), 10.0)
        ctl = GoalTracker()
        for _ in range(200):
            goal = GoalTarget((st.x + 20.0, y_c), 0.0)
            st = step_bicycle(st, ctl.command(st, goal, 0.1), 0.1)
        fails += abs(st.y - y_c) >= 0.2
    return CheckResult("lateral controller", fails == 0, f"{trials - fails}/{trials} converged")


SUITES = {
    "geometry": check_nqc_roundtrip,
    "hash": check_hash,
    "gradients": check_gradients,
    "returns": check_returns,
    "confinement": check_confinement,
    "controller": check_controller,
}


def run_selftest(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for i, (name, fn) in enumerate(SUITES.items()):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t = time.perf_counter()
        res = fn(rng)
        res.seconds = time.perf_counter() - t
        results.append(res)
    return results
