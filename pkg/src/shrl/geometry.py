"""Lane approximation by convex quadrilaterals.

Every lane is a chain of convex quadrilaterals.  A position inside a
quadrilateral is expressed in normalized quadrilateral coordinates (NQC)
``(u, v)``: ``v`` runs from the rear edge (0) to the front edge (1) and ``u``
from the left side (0) to the right side (1).

Corner convention::

    fl (0,1) ---- fr (1,1)        ^ progressing direction
     |              |             |
    rl (0,0) ---- rr (1,0)
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NQC_TOL = 1e-9
_QUAD_A_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for degenerate geometry or out-of-range coordinates."""


class PointOutsideQuad(GeometryError):
    pass


class RoadType(str, enum.Enum):
    STRAIGHT_FOUR = "StraightFour"
    CURVED_TWO = "CurvedTwo"
    MERGING_TWO_TO_ONE = "MergingTwoToOne"


@dataclass(frozen=True)
class Quad:
    """Convex lane quadrilateral.  Corners are ``(x, y)`` tuples."""

    rl: tuple[float, float]
    rr: tuple[float, float]
    fl: tuple[float, float]
    fr: tuple[float, float]
    lane: int = 0
    index: int = 0
    left_adj: tuple[int, int] | None = None
    right_adj: tuple[int, int] | None = None

    def corners(self) -> np.ndarray:
        """Corners in counter-clockwise order rl, rr, fr, fl."""
        return np.array([self.rl, self.rr, self.fr, self.fl], dtype=float)

    def bbox(self) -> tuple[float, float, float, float]:
        c = self.corners()
        return c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()

    def area(self) -> float:
        c = self.corners()
        x, y = c[:, 0], c[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def is_convex(self) -> bool:
        c = self.corners()
        edges = np.roll(c, -1, axis=0) - c
        nxt = np.roll(edges, -1, axis=0)
        cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
        return bool(np.all(cross > 0))

    def center_length(self) -> float:
        """Distance between the rear-edge and front-edge midpoints."""
        rear = nqc_to_global(self, 0.5, 0.0)
        front = nqc_to_global(self, 0.5, 1.0)
        return math.hypot(front[0] - rear[0], front[1] - rear[1])

    def contains(self, p, tol: float = 1e-9) -> bool:
        return bool(quad_contains(self.corners(), np.asarray(p, dtype=float), tol))


def quad_contains(corners: np.ndarray, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Point-in-convex-quad test.

    ``corners`` is ``(..., 4, 2)`` in counter-clockwise order and ``p`` is
    ``(..., 2)``; both broadcast.  Points on the boundary count as inside.
    """
    c = np.asarray(corners, dtype=float)
    edges = np.roll(c, -1, axis=-2) - c
    rel = p[..., None, :] - c
    cross = edges[..., 0] * rel[..., 1] - edges[..., 1] * rel[..., 0]
    scale = np.hypot(edges[..., 0], edges[..., 1])
    return np.all(cross >= -tol * scale, axis=-1)


def _contains_scalar(edges, x: float, y: float, tol: float = 1e-9) -> bool:
    """``edges`` holds ``(x0, y0, dx, dy, length)`` per edge; see LaneMap."""
    for x0, y0, dx, dy, ln in edges:
        if dx * (y - y0) - dy * (x - x0) < -tol * ln:
            return False
    return True


def make_quad(rl, rr, fl, fr, **kwargs) -> Quad:
    """Build a quad, rejecting degenerate or non-convex corner sets."""
    q = Quad(tuple(map(float, rl)), tuple(map(float, rr)), tuple(map(float, fl)),
             tuple(map(float, fr)), **kwargs)
    if not q.area() > 0:
        raise GeometryError(f"degenerate or inverted quad: {q}")
    if not q.is_convex():
        raise GeometryError(f"non-convex quad: {q}")
    return q


def nqc_to_global(quad: Quad, u: float, v: float) -> np.ndarray:
    """Two-step interpolation: along both sides by ``v``, then across by ``u``."""
    rl, rr, fl, fr = (np.asarray(c, dtype=float) for c in (quad.rl, quad.rr, quad.fl, quad.fr))
    left = rl + v * (fl - rl)
    right = rr + v * (fr - rr)
    return left + u * (right - left)


def _quadratic_roots(a: float, b: float, c: float) -> list[float]:
    if abs(a) < _QUAD_A_EPS:
        if abs(b) < _QUAD_A_EPS:
            return [0.0]
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        # tangent case polluted by rounding
        disc = 0.0
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        return [0.0]
    return [q / a, c / q]


def global_to_nqc(quad: Quad, p, tol: float = NQC_TOL) -> tuple[float, float]:
    """Invert :func:`nqc_to_global` for a point inside ``quad``.

    Equating the two expressions for ``u`` obtained from the x and y axes
    gives a quadratic in ``v``.  The root in ``[0, 1]`` is selected and ``u``
    follows from whichever axis has the better conditioned denominator.
    """
    x, y = float(p[0]), float(p[1])
    (xrl, yrl), (xrr, yrr), (xfl, yfl), (xfr, yfr) = quad.rl, quad.rr, quad.fl, quad.fr
    d_l = xfl - xrl
    e = x - xrl
    f = xrr - xrl
    g = (xfr - xrr) - (xfl - xrl)
    h_l = yfl - yrl
    i = y - yrl
    j = yrr - yrl
    k = (yfr - yrr) - (yfl - yrl)

    a = d_l * k - h_l * g
    b = g * i + d_l * j - h_l * f - e * k
    c = f * i - e * j

    best = None
    for v in _quadratic_roots(a, b, c):
        if not (-tol <= v <= 1.0 + tol):
            continue
        den_x = f + v * g
        den_y = j + v * k
        if abs(den_x) >= abs(den_y):
            u = (e - v * d_l) / den_x
        else:
            u = (i - v * h_l) / den_y
        err = max(0.0, -u, u - 1.0, -v, v - 1.0)
        if best is None or err < best[0]:
            best = (err, u, v)
    if best is None or best[0] > tol:
        raise PointOutsideQuad(f"point {p!r} is outside quad lane={quad.lane} index={quad.index}")
    _, u, v = best
    return min(max(u, 0.0), 1.0), min(max(v, 0.0), 1.0)


def global_to_nqc_batch(corners: np.ndarray, p: np.ndarray, tol: float = NQC_TOL):
    """Vectorized :func:`global_to_nqc`.

    ``corners`` is ``(n, 4, 2)`` in rl, rr, fr, fl order and ``p`` is
    ``(n, 2)``.  Returns ``(u, v, ok)``; ``ok`` flags points found inside.
    """
    c = np.asarray(corners, dtype=float)
    p = np.asarray(p, dtype=float)
    rl, rr, fr, fl = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
    d_l, h_l = (fl - rl).T
    e, i = (p - rl).T
    f, j = (rr - rl).T
    g, k = ((fr - rr) - (fl - rl)).T
    a = d_l * k - h_l * g
    b = g * i + d_l * j - h_l * f - e * k
    cc = f * i - e * j

    lin = np.abs(a) < _QUAD_A_EPS
    disc = np.maximum(b * b - 4.0 * a * cc, 0.0)
    q = -0.5 * (b + np.copysign(np.sqrt(disc), b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(lin, -cc / b, q / a)
        r2 = np.where(lin, np.nan, cc / q)
    best_u = np.full(len(p), np.nan)
    best_v = np.full(len(p), np.nan)
    best_err = np.full(len(p), np.inf)
    for v in (r1, r2):
        den_x = f + v * g
        den_y = j + v * k
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(np.abs(den_x) >= np.abs(den_y), (e - v * d_l) / den_x, (i - v * h_l) / den_y)
        err = np.maximum.reduce([np.zeros_like(u), -u, u - 1.0, -v, v - 1.0])
        err = np.where(np.isfinite(err), err, np.inf)
        take = err < best_err
        best_u = np.where(take, u, best_u)
        best_v = np.where(take, v, best_v)
        best_err = np.where(take, err, best_err)
    ok = best_err <= tol
    return np.clip(best_u, 0.0, 1.0), np.clip(best_v, 0.0, 1.0), ok


@dataclass
class LaneMap:
    """Lanes as ordered quad chains plus the derived shoulder polylines."""

    lanes: list[list[Quad]]
    road_type: RoadType | None = None
    shoulders: list[np.ndarray] = field(default_factory=list)
    corners: list[np.ndarray] = field(init=False, repr=False)
    cum: list[np.ndarray] = field(init=False, repr=False)
    edges: list[list[tuple]] = field(init=False, repr=False)
    dirs: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.corners = [np.array([q.corners() for q in lane]) for lane in self.lanes]
        self.edges = []
        for arr in self.corners:
            e = np.roll(arr, -1, axis=1) - arr
            ln = np.hypot(e[..., 0], e[..., 1])
            packed = np.concatenate([arr, e, ln[..., None]], axis=-1)  # (nq, 4, 5)
            self.edges.append([tuple(map(tuple, quad)) for quad in packed.tolist()])
        self.dirs = []
        for arr in self.corners:
            d = 0.5 * (arr[:, 3] + arr[:, 2]) - 0.5 * (arr[:, 0] + arr[:, 1])
            self.dirs.append(d / np.linalg.norm(d, axis=1, keepdims=True))
        self.cum = []
        for lane in self.lanes:
            d = np.array([q.center_length() for q in lane])
            self.cum.append(np.concatenate([[0.0], np.cumsum(d)]))
        if not self.shoulders:
            left = [q.rl for q in self.lanes[0]] + [self.lanes[0][-1].fl]
            right = [q.rr for q in self.lanes[-1]] + [self.lanes[-1][-1].fr]
            self.shoulders = [np.array(left, dtype=float), np.array(right, dtype=float)]

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def quad(self, lane: int, index: int) -> Quad:
        return self.lanes[lane][index]

    def all_quads(self):
        for lane in self.lanes:
            yield from lane

    def lane_length(self, lane: int) -> float:
        return float(self.cum[lane][-1])

    def station(self, lane: int, q: int, v: float) -> float:
        """Along-lane distance from the lane start to NQC ``(q, v)``."""
        self._check_index(lane, q)
        c = self.cum[lane]
        return float(c[q] + v * (c[q + 1] - c[q]))

    def at_station(self, lane: int, s: float) -> tuple[int, float]:
        """Inverse of :meth:`station`; ``s`` is clamped to the lane."""
        c = self.cum[lane]
        s = min(max(s, 0.0), c[-1])
        q = int(np.searchsorted(c, s, side="right")) - 1
        q = min(max(q, 0), len(c) - 2)
        d = c[q + 1] - c[q]
        v = (s - c[q]) / d
        return q, min(max(v, 0.0), 1.0)

    def side_points(self, lane: int, s: float) -> tuple[np.ndarray, np.ndarray]:
        left, right = self.side_points_batch(lane, np.array([s], dtype=float))
        return left[0], right[0]

    def side_points_batch(self, lane: int, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Left (u=0) and right (u=1) lane border points at stations ``s``."""
        c = self.cum[lane]
        s = np.clip(s, 0.0, c[-1])
        q = np.clip(np.searchsorted(c, s, side="right") - 1, 0, len(c) - 2)
        v = np.clip((s - c[q]) / (c[q + 1] - c[q]), 0.0, 1.0)[:, None]
        quads = self.corners[lane][q]  # rl, rr, fr, fl
        left = quads[:, 0] + v * (quads[:, 3] - quads[:, 0])
        right = quads[:, 1] + v * (quads[:, 2] - quads[:, 1])
        return left, right

    def direction(self, lane: int, q: int) -> np.ndarray:
        """Unit progressing direction of a quad (rear-mid to front-mid)."""
        return self.dirs[lane][q]

    def _check_index(self, lane: int, q: int):
        if not (0 <= lane < len(self.lanes)):
            raise IndexError(f"lane {lane} out of range")
        if not (0 <= q < len(self.lanes[lane])):
            raise IndexError(f"quad {q} out of range for lane {lane}")


def lane_distance(lane_map: LaneMap, lane: int, rear: tuple[int, float], front: tuple[int, float]) -> float:
    """Along-lane distance between two NQC positions of one lane.

    Sum of center lengths: the rear quad's remaining part, every full quad
    in between, and the covered part of the front quad.
    """
    (q_r, v_r), (q_f, v_f) = rear, front
    lane_map._check_index(lane, q_r)
    lane_map._check_index(lane, q_f)
    s_r = lane_map.station(lane, q_r, v_r)
    s_f = lane_map.station(lane, q_f, v_f)
    if s_f < s_r:
        raise GeometryError(f"rear {rear} is ahead of front {front}")
    return s_f - s_r


@dataclass
class QuadHash:
    """Uniform-grid hash of quad bounding boxes.

    Bins are larger than any quad's bounding box, so the bounding-box
    vertices of a quad fall in one to four neighbouring bins, and the single
    bin of a query point holds every quad that may contain it.
    """

    bin_width: float
    bin_height: float
    bins: dict[tuple[int, int], list[tuple[int, int]]]
    lane_map: LaneMap

    def cell(self, p) -> tuple[int, int]:
        return int(math.floor(p[0] / self.bin_width)), int(math.floor(p[1] / self.bin_height))

    def candidates(self, p) -> list[tuple[int, int]]:
        return self.bins.get(self.cell(p), [])


def build_quad_hash(lane_map: LaneMap, scale: float = 2.0) -> QuadHash:
    extents = np.array([[b[2] - b[0], b[3] - b[1]] for b in (q.bbox() for q in lane_map.all_quads())])
    size = scale * float(extents.max())
    qh = QuadHash(size, size, {}, lane_map)
    if not (np.all(extents[:, 0] < qh.bin_width) and np.all(extents[:, 1] < qh.bin_height)):
        raise GeometryError("bin size does not exceed every quad bounding box")
    bins = defaultdict(list)
    for quad in lane_map.all_quads():
        x0, y0, x1, y1 = quad.bbox()
        cells = {qh.cell((x, y)) for x in (x0, x1) for y in (y0, y1)}
        for cell in cells:
            bins[cell].append((quad.lane, quad.index))
    for key in bins:
        bins[key].sort()
    qh.bins = dict(bins)
    return qh


def lookup_quad(qh: QuadHash, p, lane: int | None = None):
    """Quad containing ``p`` as ``(lane, q, u, v)``, or ``None``.

    Only the bin of ``p`` is scanned.  Overlapping quads resolve to the
    lowest ``(lane, index)``.  ``lane`` restricts the search to one lane.
    """
    x, y = float(p[0]), float(p[1])
    edges = qh.lane_map.edges
    for ln, qi in qh.candidates((x, y)):
        if lane is not None and ln != lane:
            continue
        if _contains_scalar(edges[ln][qi], x, y):
            quad = qh.lane_map.lanes[ln][qi]
            try:
                u, v = global_to_nqc(quad, (x, y), tol=1e-7)
            except PointOutsideQuad:
                continue
            return ln, qi, u, v
    return None


def scan_quad(lane_map: LaneMap, p, lane: int | None = None):
    """Linear-scan reference for :func:`lookup_quad`."""
    p = np.asarray(p, dtype=float)
    for ln, corners in enumerate(lane_map.corners):
        if lane is not None and ln != lane:
            continue
        inside = np.nonzero(quad_contains(corners, p))[0]
        for qi in inside:
            quad = lane_map.lanes[ln][qi]
            try:
                u, v = global_to_nqc(quad, p, tol=1e-7)
            except PointOutsideQuad:
                continue
            return ln, int(qi), u, v
    return None


@dataclass
class RoadParams:
    lane_width: float = 4.0
    quad_length: float = 5.0
    road_length: float = 500.0
    curve_radius: float = 200.0
    merge_taper: float = 100.0
    merge_start: float = 200.0

    def validate(self):
        for name in ("lane_width", "quad_length", "road_length", "curve_radius", "merge_taper"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be positive")


def _link_neighbours(lanes: list[list[Quad]], aligned) -> list[list[Quad]]:
    """Attach symmetric left/right adjacency where ``aligned(lane, q)`` holds."""
    out = [list(lane) for lane in lanes]
    for ln in range(len(lanes) - 1):
        for qi in range(len(lanes[ln])):
            if qi < len(lanes[ln + 1]) and aligned(ln, qi):
                left = out[ln][qi]
                right = out[ln + 1][qi]
                out[ln][qi] = Quad(left.rl, left.rr, left.fl, left.fr, left.lane, left.index,
                                   left.left_adj, (ln + 1, qi))
                out[ln + 1][qi] = Quad(right.rl, right.rr, right.fl, right.fr, right.lane, right.index,
                                       (ln, qi), right.right_adj)
    return out


def _straight(params: RoadParams, n_lanes: int, lateral_offset=None) -> list[list[Quad]]:
    w, L = params.lane_width, params.quad_length
    n = int(round(params.road_length / L))
    xs = np.linspace(0.0, n * L, n + 1)
    lanes = []
    for ln in range(n_lanes):
        off = np.zeros_like(xs) if lateral_offset is None else lateral_offset(ln, xs)
        top = -ln * w + off
        bot = -(ln + 1) * w + off
        lanes.append([
            make_quad((xs[k], top[k]), (xs[k], bot[k]), (xs[k + 1], top[k + 1]), (xs[k + 1], bot[k + 1]),
                      lane=ln, index=k)
            for k in range(n)
        ])
    return lanes


def straight_road(n_lanes: int, params: RoadParams | None = None) -> LaneMap:
    """``n_lanes`` parallel lanes along +x, lane 0 on the left (untyped)."""
    if n_lanes < 1:
        raise GeometryError("need at least one lane")
    params = params or RoadParams()
    params.validate()
    return LaneMap(_link_neighbours(_straight(params, n_lanes), lambda ln, qi: True), None)


def generate_road(road_type: RoadType | str, params: RoadParams | None = None) -> LaneMap:
    """Build one of the three road fixtures.

    * StraightFour: four parallel lanes along +x.
    * CurvedTwo: two lanes on a constant-radius left-hand arc.
    * MergingTwoToOne: the right lane shifts left over a linear taper and
      coincides with the left lane afterwards.
    """
    road_type = RoadType(road_type)
    params = params or RoadParams()
    params.validate()
    w = params.lane_width

    if road_type is RoadType.STRAIGHT_FOUR:
        lanes = _straight(params, 4)
        lanes = _link_neighbours(lanes, lambda ln, qi: True)
    elif road_type is RoadType.CURVED_TWO:
        R = params.curve_radius
        n_lanes = 2
        r_left = R - n_lanes * w / 2.0
        if r_left <= 0:
            raise GeometryError("curve radius too small for the road width")
        n = int(round(params.road_length / params.quad_length))
        thetas = np.linspace(0.0, params.road_length / R, n + 1)
        center = np.array([0.0, R])

        def pt(r, th):
            return center + r * np.array([math.sin(th), -math.cos(th)])

        lanes = []
        for ln in range(n_lanes):
            ri, ro = r_left + ln * w, r_left + (ln + 1) * w
            lanes.append([
                make_quad(pt(ri, thetas[k]), pt(ro, thetas[k]), pt(ri, thetas[k + 1]), pt(ro, thetas[k + 1]),
                          lane=ln, index=k)
                for k in range(n)
            ])
        lanes = _link_neighbours(lanes, lambda ln, qi: True)
    else:
        x0, T = params.merge_start, params.merge_taper
        if x0 + T > params.road_length:
            raise GeometryError("merge taper extends past the road end")

        def offset(ln, xs):
            if ln == 0:
                return np.zeros_like(xs)
            return w * np.clip((xs - x0) / T, 0.0, 1.0)

        lanes = _straight(params, 2, offset)
        lanes = _link_neighbours(lanes, lambda ln, qi: lanes[ln][qi].fl[0] <= x0 + 1e-9)
    return LaneMap(lanes, road_type)


_FIXTURE_FIELDS = ["lane", "index", "rl_x", "rl_y", "rr_x", "rr_y", "fl_x", "fl_y", "fr_x", "fr_y",
                   "left_lane", "left_index", "right_lane", "right_index"]


def dump_lane_map(lane_map: LaneMap) -> str:
    """One CSV record per quad; full float precision via ``repr``."""
    buf = io.StringIO()
    rt = lane_map.road_type.value if lane_map.road_type else ""
    buf.write(f"# road_type={rt}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_FIXTURE_FIELDS)
    for q in lane_map.all_quads():
        la = q.left_adj or (-1, -1)
        ra = q.right_adj or (-1, -1)
        writer.writerow([q.lane, q.index, *(repr(c) for corner in (q.rl, q.rr, q.fl, q.fr) for c in corner),
                         *la, *ra])
    return buf.getvalue()


def load_lane_map(text: str) -> LaneMap:
    lines = text.splitlines()
    road_type = None
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "road_type" and value:
                road_type = RoadType(value)
        elif line.strip():
            body.append(line)
    lanes: dict[int, list[Quad]] = defaultdict(list)
    for row in csv.DictReader(body):
        la = (int(row["left_lane"]), int(row["left_index"]))
        ra = (int(row["right_lane"]), int(row["right_index"]))
        q = make_quad((float(row["rl_x"]), float(row["rl_y"])), (float(row["rr_x"]), float(row["rr_y"])),
                      (float(row["fl_x"]), float(row["fl_y"])), (float(row["fr_x"]), float(row["fr_y"])),
                      lane=int(row["lane"]), index=int(row["index"]),
                      left_adj=None if la[0] < 0 else la, right_adj=None if ra[0] < 0 else ra)
        lanes[q.lane].append(q)
    ordered = [sorted(lanes[k], key=lambda q: q.index) for k in sorted(lanes)]
    return LaneMap(ordered, road_type)


def save_lane_map(lane_map: LaneMap, path: str | Path):
    Path(path).write_text(dump_lane_map(lane_map))


def read_lane_map(path: str | Path) -> LaneMap:
    return load_lane_map(Path(path).read_text())
