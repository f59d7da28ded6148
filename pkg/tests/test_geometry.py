import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_convex_quad, rel_err
from shrl.geometry import (GeometryError, LaneMap, PointOutsideQuad, RoadParams, RoadType, build_quad_hash,
                           dump_lane_map, generate_road, global_to_nqc, global_to_nqc_batch, lane_distance,
                           load_lane_map, lookup_quad, make_quad, nqc_to_global, scan_quad, straight_road)

UNIT = make_quad((0, 0), (1, 0), (0, 1), (1, 1))


def test_unit_square_forward_and_inverse():
    np.testing.assert_allclose(nqc_to_global(UNIT, 0.3, 0.7), [0.3, 0.7], atol=1e-15)
    u, v = global_to_nqc(UNIT, (0.3, 0.7))
    assert abs(u - 0.3) < 1e-12 and abs(v - 0.7) < 1e-12


def test_origin_maps_to_rear_left(rng):
    for _ in range(50):
        q = random_convex_quad(rng)
        np.testing.assert_array_equal(nqc_to_global(q, 0.0, 0.0), np.asarray(q.rl))


def test_trapezoid_center():
    q = make_quad((0, 0), (2, 0), (0.5, 1), (1.5, 1))
    np.testing.assert_allclose(nqc_to_global(q, 0.5, 0.5), [1.0, 0.5], atol=1e-15)
    u, v = global_to_nqc(q, (1.0, 0.5))
    assert abs(u - 0.5) < 1e-12 and abs(v - 0.5) < 1e-12


def test_parallelogram_linear_branch():
    q = make_quad((0, 0), (1, 0), (1, 1), (2, 1))
    u, v = global_to_nqc(q, (1.0, 0.5))
    assert abs(u - 0.5) < 1e-12 and abs(v - 0.5) < 1e-12


def test_outside_point_rejected():
    with pytest.raises(PointOutsideQuad):
        global_to_nqc(UNIT, (1.5, 0.5))


@pytest.mark.parametrize("corners", [
    ((0, 0), (1, 0), (0, 0), (1, 0)),          # zero area
    ((0, 0), (1, 0), (0.9, 0.2), (1, 1)),      # non-convex
    ((1, 0), (0, 0), (1, 1), (0, 1)),          # mirrored orientation
])
def test_bad_quads_rejected(corners):
    with pytest.raises(GeometryError):
        make_quad(*corners)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), u=st.floats(0.001, 0.999), v=st.floats(0.001, 0.999))
def test_round_trip_property(seed, u, v):
    q = random_convex_quad(np.random.default_rng(seed))
    u2, v2 = global_to_nqc(q, nqc_to_global(q, u, v))
    assert max(abs(u2 - u), abs(v2 - v)) < 1e-9


def _v_polynomial_roots(q, p):
    """Roots of cross(right(v) - left(v), p - left(v)) = 0, a quadratic in v
    recovered by exact interpolation through three samples."""
    rl, rr, fl, fr = (np.asarray(c, dtype=float) for c in (q.rl, q.rr, q.fl, q.fr))

    def g(v):
        a = rl + v * (fl - rl)
        b = rr + v * (fr - rr)
        d, w = b - a, p - a
        return d[0] * w[1] - d[1] * w[0]

    coef = np.polyfit([0.0, 0.5, 1.0], [g(0.0), g(0.5), g(1.0)], 2)
    if abs(coef[0]) < 1e-12 * max(1.0, np.abs(coef).max()):
        return np.array([-coef[2] / coef[1]])
    return np.roots(coef)


def test_exactly_one_root_inside(rng):
    for _ in range(2000):
        q = random_convex_quad(rng)
        u, v = rng.uniform(0.02, 0.98, 2)
        roots = _v_polynomial_roots(q, nqc_to_global(q, u, v))
        real = roots[np.abs(np.imag(roots)) < 1e-9].real
        inside = real[(real >= -1e-9) & (real <= 1 + 1e-9)]
        assert len(inside) == 1
        assert abs(inside[0] - v) < 1e-6


def test_batch_matches_scalar(rng):
    quads = [random_convex_quad(rng) for _ in range(300)]
    uv = rng.uniform(0, 1, (300, 2))
    pts = np.array([nqc_to_global(q, *t) for q, t in zip(quads, uv)])
    u, v, ok = global_to_nqc_batch(np.array([q.corners() for q in quads]), pts)
    assert ok.all()
    np.testing.assert_allclose(np.column_stack([u, v]), uv, atol=1e-9)


def _three_unit_quads():
    lanes = [[make_quad((k, 0), (k, -1), (k + 1, 0), (k + 1, -1), lane=0, index=k) for k in range(3)]]
    return LaneMap(lanes)


def test_lane_distance_examples():
    lm = _three_unit_quads()
    assert lane_distance(lm, 0, (0, 0.5), (2, 0.5)) == pytest.approx(2.0, abs=1e-15)
    assert lane_distance(lm, 0, (1, 0.0), (1, 1.0)) == pytest.approx(lm.quad(0, 1).center_length(), abs=1e-15)


def test_lane_distance_errors():
    lm = _three_unit_quads()
    with pytest.raises(IndexError):
        lane_distance(lm, 0, (0, 0.0), (5, 0.0))
    with pytest.raises(GeometryError):
        lane_distance(lm, 0, (2, 0.5), (0, 0.5))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.lists(st.integers(0, 99), min_size=3, max_size=3))
def test_lane_distance_additive(vs, qs):
    lm = generate_road(RoadType.CURVED_TWO)
    pts = sorted(zip(qs, vs))
    a, b, c = pts
    ab = lane_distance(lm, 1, a, b)
    bc = lane_distance(lm, 1, b, c)
    ac = lane_distance(lm, 1, a, c)
    assert abs(ab + bc - ac) <= 1e-12 * max(ac, 1.0)


def test_lane_distance_matches_dense_arc():
    lm = generate_road(RoadType.CURVED_TWO)
    for lane in range(2):
        rear, front = (3, 0.25), (87, 0.6)
        pts = []
        for q in range(rear[0], front[0] + 1):
            lo = rear[1] if q == rear[0] else 0.0
            hi = front[1] if q == front[0] else 1.0
            for v in np.linspace(lo, hi, 200):
                pts.append(nqc_to_global(lm.quad(lane, q), 0.5, v))
        pts = np.array(pts)
        dense = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
        # exact arc length of the lane center between the two stations
        r_c = 200.0 - 4.0 + (lane + 0.5) * 4.0
        dtheta = (5.0 / 200.0)
        arc = r_c * dtheta * ((front[0] + front[1]) - (rear[0] + rear[1]))
        d = lane_distance(lm, lane, rear, front)
        assert rel_err(d, dense) < 1e-3
        assert rel_err(d, arc) < 1e-3


def test_hash_bin_invariant_and_storage():
    for rt in RoadType:
        lm = generate_road(rt)
        qh = build_quad_hash(lm)
        for q in lm.all_quads():
            x0, y0, x1, y1 = q.bbox()
            assert x1 - x0 < qh.bin_width and y1 - y0 < qh.bin_height
        counts = {}
        for cell, items in qh.bins.items():
            assert len(items) == len(set(items))
            for it in items:
                counts[it] = counts.get(it, 0) + 1
        assert all(1 <= c <= 4 for c in counts.values())
        assert len(counts) == sum(len(lane) for lane in lm.lanes)


def test_hash_single_and_four_bins():
    q_in = make_quad((0.2, 0.2), (0.2, 0.1), (0.3, 0.2), (0.3, 0.1), lane=0, index=0)
    q_corner = make_quad((9.9, 9.95), (9.9, 9.85), (10.1, 10.15), (10.1, 10.05), lane=1, index=0)
    lm = LaneMap([[q_in], [q_corner]])
    qh = build_quad_hash(lm, scale=2.0)
    where_in = [c for c, items in qh.bins.items() if (0, 0) in items]
    assert len(where_in) == 1
    # shift so the second quad straddles a bin corner
    w = qh.bin_width
    cx = math.floor(10.0 / w) * w + w
    q2 = make_quad((cx - 0.05, cx + 0.05), (cx - 0.05, cx - 0.05), (cx + 0.05, cx + 0.05), (cx + 0.05, cx - 0.05),
                   lane=1, index=0)
    qh2 = build_quad_hash(LaneMap([[q_in], [q2]]), scale=2.0)
    assert sum((1, 0) in items for items in qh2.bins.values()) == 4


def test_hash_equals_scan(rng):
    for rt in RoadType:
        lm = generate_road(rt)
        qh = build_quad_hash(lm)
        pts = np.concatenate([q.corners() for q in lm.all_quads()])
        lo, hi = pts.min(axis=0) - 3, pts.max(axis=0) + 3
        for p in rng.uniform(lo, hi, (3000, 2)):
            assert lookup_quad(qh, p) == scan_quad(lm, p)


def test_straight_four_counts():
    lm = generate_road(RoadType.STRAIGHT_FOUR, RoadParams(road_length=500.0, quad_length=5.0))
    assert lm.n_lanes == 4
    assert sum(len(lane) for lane in lm.lanes) == 400
    for q in lm.all_quads():
        c = q.corners()
        e = np.roll(c, -1, axis=0) - c
        assert np.allclose([np.dot(e[i], e[(i + 1) % 4]) for i in range(4)], 0.0, atol=1e-9)


@pytest.mark.parametrize("rt", list(RoadType))
def test_road_invariants(rt):
    lm = generate_road(rt)
    for lane in lm.lanes:
        for a, b in zip(lane[:-1], lane[1:]):
            assert np.allclose(a.fl, b.rl, atol=1e-9) and np.allclose(a.fr, b.rr, atol=1e-9)
    for q in lm.all_quads():
        assert q.is_convex() and q.area() > 0
        if q.left_adj is not None:
            assert lm.quad(*q.left_adj).right_adj == (q.lane, q.index)
        if q.right_adj is not None:
            assert lm.quad(*q.right_adj).left_adj == (q.lane, q.index)


def test_merging_road_layout():
    p = RoadParams()
    lm = generate_road(RoadType.MERGING_TWO_TO_ONE, p)
    left, right = lm.lanes
    for a, b in zip(left, right):
        if a.fr[0] <= p.merge_start:
            # disjoint before the taper: shared edge only
            assert max(b.rl[1], b.fl[1]) <= min(a.rr[1], a.fr[1]) + 1e-9
        if a.rl[0] >= p.merge_start + p.merge_taper:
            assert np.allclose(a.corners(), b.corners(), atol=1e-9)
    assert all(q.left_adj is None and q.right_adj is None
               for q in lm.all_quads() if q.rl[0] >= p.merge_start)


def test_merge_overlap_resolves_to_lowest_lane():
    lm = generate_road(RoadType.MERGING_TWO_TO_ONE)
    qh = build_quad_hash(lm)
    loc = lookup_quad(qh, (400.0, -2.0))
    assert loc is not None and loc[0] == 0


def test_fixture_round_trip():
    for rt in RoadType:
        lm = generate_road(rt)
        back = load_lane_map(dump_lane_map(lm))
        assert back.road_type is rt
        assert [[q for q in lane] for lane in back.lanes] == [[q for q in lane] for lane in lm.lanes]


def test_straight_road_builder():
    lm = straight_road(3, RoadParams(road_length=50.0))
    assert lm.n_lanes == 3 and len(lm.lanes[0]) == 10
    assert lm.quad(1, 0).left_adj == (0, 0) and lm.quad(1, 0).right_adj == (2, 0)
