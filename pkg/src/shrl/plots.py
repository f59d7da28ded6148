"""Static SVG output: training curves and trajectory overlays.

Each document declares its world-to-pixel map in a ``data-affine``
attribute on the root element as ``"sx 0 0 sy tx ty"`` so that
``X = sx * x + tx`` and ``Y = sy * y + ty``.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .geometry import LaneMap

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


@dataclass(frozen=True)
class Affine:
    sx: float
    sy: float
    tx: float
    ty: float

    def apply(self, x, y):
        return self.sx * np.asarray(x) + self.tx, self.sy * np.asarray(y) + self.ty

    def invert(self, X, Y):
        return (np.asarray(X) - self.tx) / self.sx, (np.asarray(Y) - self.ty) / self.sy

    def attr(self) -> str:
        return f"{self.sx!r} 0 0 {self.sy!r} {self.tx!r} {self.ty!r}"

    @classmethod
    def parse(cls, text: str) -> "Affine":
        sx, _, _, sy, tx, ty = (float(t) for t in text.split())
        return cls(sx, sy, tx, ty)


def fit_viewport(xmin, xmax, ymin, ymax, width, height, margin, equal: bool) -> Affine:
    """Map the box into the canvas with y pointing up."""
    dx = max(xmax - xmin, 1e-9)
    dy = max(ymax - ymin, 1e-9)
    sx = (width - 2 * margin) / dx
    sy = (height - 2 * margin) / dy
    if equal:
        sx = sy = min(sx, sy)
    tx = margin - sx * xmin
    ty = height - margin + sy * ymin
    return Affine(float(sx), float(-sy), float(tx), float(ty))


def _svg(width: int, height: int, affine: Affine) -> ET.Element:
    return ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg", "width": str(width), "height": str(height),
                              "viewBox": f"0 0 {width} {height}", "data-affine": affine.attr()})


def _points(affine: Affine, xy: np.ndarray) -> str:
    X, Y = affine.apply(xy[:, 0], xy[:, 1])
    return " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(X, Y))


def _text(parent, x, y, s, **kw):
    el = ET.SubElement(parent, "text", {"x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": "12",
                                        "font-family": "sans-serif", **kw})
    el.text = s
    return el


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo if hi > lo else 1.0
    step = 10 ** math.floor(math.log10(span / n))
    for m in (1, 2, 5, 10):
        if span / (step * m) <= n:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def training_curve_svg(episodes, returns, moving_avg, title: str = "", width: int = 640, height: int = 400) -> str:
    """Per-episode returns (faint dots) and their moving average (line)."""
    ep = np.asarray(episodes, dtype=float)
    ret = np.asarray(returns, dtype=float)
    ma = np.asarray(moving_avg, dtype=float)
    margin = 50
    if len(ep):
        ys = np.concatenate([ret, ma])
        affine = fit_viewport(ep.min(), max(ep.max(), ep.min() + 1), ys.min(), max(ys.max(), ys.min() + 1e-3),
                              width, height, margin, equal=False)
    else:
        affine = fit_viewport(0, 1, -1, 1, width, height, margin, equal=False)
    root = _svg(width, height, affine)
    ET.SubElement(root, "rect", {"width": str(width), "height": str(height), "fill": "white"})
    _text(root, margin, 25, title or "training curve", **{"font-size": "14"})
    axes = ET.SubElement(root, "g", {"class": "axes", "stroke": "#444", "fill": "none"})
    ET.SubElement(axes, "rect", {"x": str(margin), "y": str(margin), "width": str(width - 2 * margin),
                                 "height": str(height - 2 * margin)})
    ylo, yhi = affine.invert(0, height - margin)[1], affine.invert(0, margin)[1]
    for t in _nice_ticks(float(ylo), float(yhi)):
        _, Y = affine.apply(0, t)
        _text(root, 5, float(Y) + 4, f"{t:g}")
    xlo, xhi = affine.invert(margin, 0)[0], affine.invert(width - margin, 0)[0]
    for t in _nice_ticks(float(xlo), float(xhi)):
        X, _ = affine.apply(t, 0)
        _text(root, float(X) - 8, height - margin + 18, f"{t:g}")
    _text(root, width / 2 - 25, height - 8, "episode")
    if len(ep):
        dots = ET.SubElement(root, "g", {"class": "returns", "fill": "#9ecae1"})
        X, Y = affine.apply(ep, ret)
        for a, b in zip(X, Y):
            ET.SubElement(dots, "circle", {"cx": f"{a:.3f}", "cy": f"{b:.3f}", "r": "1.5"})
        ET.SubElement(root, "polyline", {"class": "moving-average", "fill": "none", "stroke": PALETTE[0],
                                         "stroke-width": "2", "points": _points(affine, np.column_stack([ep, ma]))})
    return ET.tostring(root, encoding="unicode")


def lane_polygon(lane_map: LaneMap, lane: int) -> np.ndarray:
    quads = lane_map.lanes[lane]
    left = [quads[0].rl] + [q.fl for q in quads]
    right = [quads[0].rr] + [q.fr for q in quads]
    return np.array(left + right[::-1], dtype=float)


def trajectory_svg(lane_map: LaneMap, tracks: dict, width: int = 1000, margin: int = 20) -> str:
    """Road surface, shoulders and one polyline per agent track."""
    pts = np.concatenate([lane_polygon(lane_map, i) for i in range(lane_map.n_lanes)])
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    aspect = (ymax - ymin) / max(xmax - xmin, 1e-9)
    height = int(max(120, min(2000, width * aspect + 2 * margin)))
    affine = fit_viewport(xmin, xmax, ymin, ymax, width, height, margin, equal=True)
    root = _svg(width, height, affine)
    ET.SubElement(root, "rect", {"width": str(width), "height": str(height), "fill": "white"})
    road = ET.SubElement(root, "g", {"class": "road", "fill": "#e8e8e8", "stroke": "#bbbbbb", "stroke-width": "0.5"})
    for lane in range(lane_map.n_lanes):
        ET.SubElement(road, "polygon", {"class": "lane", "data-lane": str(lane),
                                        "points": _points(affine, lane_polygon(lane_map, lane))})
    shoulders = ET.SubElement(root, "g", {"class": "shoulders", "fill": "none", "stroke": "#333", "stroke-width": "1.5"})
    for side in lane_map.shoulders:
        ET.SubElement(shoulders, "polyline", {"class": "shoulder", "points": _points(affine, np.asarray(side))})
    paths = ET.SubElement(root, "g", {"class": "tracks", "fill": "none", "stroke-width": "1.5"})
    for k, (agent, xy) in enumerate(sorted(tracks.items(), key=lambda kv: str(kv[0]))):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if len(xy) == 0:
            continue
        ET.SubElement(paths, "polyline", {"class": "track", "data-agent": str(agent),
                                          "stroke": PALETTE[k % len(PALETTE)], "points": _points(affine, xy)})
    return ET.tostring(root, encoding="unicode")


def parse_points(text: str) -> np.ndarray:
    return np.array([[float(v) for v in p.split(",")] for p in text.split()])
