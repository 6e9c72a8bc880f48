"""Procedural semantic base maps.

A map is a jittered grid of intersections joined by straight and curved road
segments. Roads are rasterised as drivable surface flanked by walkways, with
optional centre dividers, crosswalks and stop lines at intersections, and
rectangular car parks beside the roads.

Street style (lane count, walkway width, divider and crosswalk odds, car park
density) follows smooth random fields over the map, so neighbourhoods differ
the way districts of a real city do. ``heterogeneity=0`` gives a uniform city.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import GenerationError, SpawnError
from .geom import MapSpec, Pose2
from .raster import (BACKGROUND, CARPARK, CROSSING, DIVIDER, DRIVABLE, STOP_LINE, WALKWAY,
                     SemanticRaster)

_SHIFT = 3  # cv2 fixed-point sub-pixel bits
_WALKWAY_M = 3.0
_DIVIDER_M = 1.0
_CROSSING_DEPTH_M = 4.0
_STOP_LINE_M = 1.0
_KEEP_EDGE = 0.55
_KEEP_EXIT = 0.7
_CURVE_PROB = 0.3


@dataclass(frozen=True)
class WorldGenConfig:
    seed: int = 0
    road_graph_density: float = 100.0  # intersections per km^2
    lane_width: float = 3.5
    crosswalk_probability: float = 0.5
    carpark_count: int = 16
    divider_probability: float = 0.6
    heterogeneity: float = 1.0  # 0 = uniform street style everywhere

    def __post_init__(self):
        for name in ("crosswalk_probability", "divider_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.road_graph_density <= 0:
            raise ValueError("road_graph_density must be positive")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if self.carpark_count < 0:
            raise ValueError("carpark_count must be non-negative")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldGenConfig":
        return cls(**d)


@dataclass
class _Road:
    a: int
    b: int
    pts: np.ndarray  # (k, 2) metres, map frame
    lanes: int
    divider: bool
    walkway_m: float = _WALKWAY_M


_STYLES = ("lanes", "walkway", "divider", "crossing", "carpark")
_FIELD_STEP_M = 50.0
_FIELD_SIGMA = 1.5  # in field-grid steps


class _StyleField:
    """Smooth per-style fields on [0, 1]; constant 0.5 when heterogeneity is 0."""

    def __init__(self, spec: MapSpec, heterogeneity: float, rng: np.random.Generator):
        n = int(math.ceil(spec.extent_m / _FIELD_STEP_M)) + 1
        self.h = heterogeneity
        self.grids = {}
        for name in _STYLES:
            g = gaussian_filter(rng.standard_normal((n, n)), _FIELD_SIGMA, mode="wrap")
            g = (g - g.min()) / max(g.max() - g.min(), 1e-12)
            self.grids[name] = g

    def __call__(self, name: str, p) -> float:
        g = self.grids[name]
        c = np.asarray(p, float) / _FIELD_STEP_M
        val = float(map_coordinates(g, [[c[1]], [c[0]]], order=1, mode="nearest")[0])
        return 0.5 + self.h * (val - 0.5)


class _Painter:
    """Draws metric primitives onto a class raster."""

    def __init__(self, spec: MapSpec):
        self.spec = spec
        self.img = np.zeros((spec.size_px, spec.size_px), np.uint8)

    def _px(self, pts):
        pts = np.atleast_2d(pts)
        u = pts[:, 0] / self.spec.resolution
        v = (self.spec.extent_m - pts[:, 1]) / self.spec.resolution
        return np.round(np.stack([u, v], 1) * (1 << _SHIFT)).astype(np.int32)

    def _thick(self, width_m):
        return max(1, int(round(width_m / self.spec.resolution)))

    def polyline(self, pts, width_m, cls, target=None):
        img = self.img if target is None else target
        cv2.polylines(img, [self._px(pts)], False, int(cls), self._thick(width_m),
                      cv2.LINE_8, _SHIFT)

    def disc(self, center, radius_m, cls, target=None):
        img = self.img if target is None else target
        c = self._px(center)[0]
        r = int(round(radius_m / self.spec.resolution * (1 << _SHIFT)))
        cv2.circle(img, (int(c[0]), int(c[1])), r, int(cls), -1, cv2.LINE_8, _SHIFT)

    def polygon(self, corners, cls, only_on=None):
        if only_on is None:
            cv2.fillPoly(self.img, [self._px(corners)], int(cls), cv2.LINE_8, _SHIFT)
            return
        mask = np.zeros_like(self.img)
        cv2.fillPoly(mask, [self._px(corners)], 1, cv2.LINE_8, _SHIFT)
        self.img[(mask == 1) & (self.img == only_on)] = cls


def _rect(center, along, half_len, half_wid):
    d = np.asarray(along, float)
    n = np.array([-d[1], d[0]])
    c = np.asarray(center, float)
    return np.array([c + d * half_len + n * half_wid, c - d * half_len + n * half_wid,
                     c - d * half_len - n * half_wid, c + d * half_len - n * half_wid])


def _bezier(p0, p1, ctrl, k=24):
    t = np.linspace(0.0, 1.0, k)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p1


def _spanning_edges(n_nodes, edges, rng):
    parent = list(range(n_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    tree = []
    for k in rng.permutation(len(edges)):
        a, b = edges[k]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            tree.append(int(k))
    return tree


def _layout(config: WorldGenConfig, spec: MapSpec, rng: np.random.Generator, style: _StyleField):
    area_km2 = (spec.extent_m / 1000.0) ** 2
    n_in = int(round(math.sqrt(config.road_graph_density * area_km2)))
    if n_in < 2:
        raise GenerationError(
            f"road_graph_density={config.road_graph_density}/km^2 yields {n_in * n_in} "
            "intersections inside the map; at least 4 are required")
    s = spec.extent_m / n_in
    n = n_in + 2
    coords = (np.arange(n) - 0.5) * s
    gx, gy = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.stack([gx.ravel(), gy.ravel()], 1)
    nodes = nodes + rng.uniform(-0.2 * s, 0.2 * s, nodes.shape)

    def idx(i, j):
        return i * n + j

    def interior(i, j):
        return 1 <= i <= n_in and 1 <= j <= n_in

    inner, exits = [], []
    for i in range(n):
        for j in range(n):
            for di, dj in ((0, 1), (1, 0)):
                i2, j2 = i + di, j + dj
                if i2 >= n or j2 >= n:
                    continue
                if interior(i, j) and interior(i2, j2):
                    inner.append((idx(i, j), idx(i2, j2)))
                elif interior(i, j) or interior(i2, j2):
                    exits.append((idx(i, j), idx(i2, j2)))

    # arterials: one grid row and one grid column, kept whole and four lanes wide
    art_row = int(rng.integers(1, n_in + 1))
    art_col = int(rng.integers(1, n_in + 1))

    def arterial(a, b):
        (ia, ja), (ib, jb) = divmod(a, n), divmod(b, n)
        return (ia == ib == art_row) or (ja == jb == art_col)

    tree = set(_spanning_edges(n * n, inner, rng))
    keep_draw = rng.random(len(inner))
    chosen = [e for k, e in enumerate(inner)
              if k in tree or arterial(*e) or keep_draw[k] < _KEEP_EDGE]
    exit_draw = rng.random(len(exits))
    chosen += [e for k, e in enumerate(exits) if arterial(*e) or exit_draw[k] < _KEEP_EXIT]

    roads = []
    for a, b in chosen:
        p0, p1 = nodes[a], nodes[b]
        art = arterial(a, b)
        curve_u, curve_off, div_u = rng.random(), rng.uniform(0.15, 0.3), rng.random()
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if not art and curve_u < _CURVE_PROB:
            d = p1 - p0
            ctrl = (p0 + p1) / 2 + sign * curve_off * np.array([-d[1], d[0]])
            pts = _bezier(p0, p1, ctrl)
        else:
            pts = np.stack([p0, p1])
        mid = pts[len(pts) // 2] if len(pts) > 2 else 0.5 * (p0 + p1)
        lanes = 4 if art else 2 + int(style("lanes", mid) > 0.62) + int(style("lanes", mid) > 0.85)
        p_div = min(1.0, config.divider_probability * 2.0 * style("divider", mid))
        walk = _WALKWAY_M * (0.4 + 1.2 * style("walkway", mid))
        roads.append(_Road(a, b, pts, lanes, bool(div_u < p_div), walk))
    interior_ids = [idx(i, j) for i in range(1, n_in + 1) for j in range(1, n_in + 1)]
    return nodes, roads, interior_ids


def _width(road, cfg):
    return road.lanes * cfg.lane_width


def _trim(pts, start_m, end_m):
    """Sub-polyline between arc lengths ``start_m`` and ``total - end_m``."""
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total - start_m - end_m <= 1.0:
        return None
    ts = np.concatenate([[start_m], cum[(cum > start_m) & (cum < total - end_m)], [total - end_m]])
    x = np.interp(ts, cum, pts[:, 0])
    y = np.interp(ts, cum, pts[:, 1])
    return np.stack([x, y], 1)


def generate_map(config: WorldGenConfig, spec: MapSpec = MapSpec()) -> SemanticRaster:
    """Rasterise a deterministic synthetic road network for ``(config, spec)``."""
    if spec.size_px < 200:
        raise GenerationError(f"raster side {spec.size_px} px is below the 200 px minimum")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    style = _StyleField(spec, config.heterogeneity, rng)
    nodes, roads, interior_ids = _layout(config, spec, rng, style)
    paint = _Painter(spec)

    incident = {}
    for r in roads:
        incident.setdefault(r.a, []).append(r)
        incident.setdefault(r.b, []).append(r)
    node_w = {k: max(_width(r, config) for r in rs) for k, rs in incident.items()}
    node_r = {k: 0.5 * w + 1.5 for k, w in node_w.items()}

    node_walk = {k: max(r.walkway_m for r in rs) for k, rs in incident.items()}
    for r in roads:
        paint.polyline(r.pts, _width(r, config) + 2 * r.walkway_m, WALKWAY)
    for k in incident:
        paint.disc(nodes[k], node_r[k] + node_walk[k], WALKWAY)

    _carparks(paint, roads, config, rng, style)

    for r in roads:
        paint.polyline(r.pts, _width(r, config), DRIVABLE)
    for k in incident:
        paint.disc(nodes[k], node_r[k], DRIVABLE)

    crossing_nodes = set()
    cw_draw = rng.random(len(interior_ids))
    for u, k in zip(cw_draw, interior_ids):
        p_cw = min(1.0, config.crosswalk_probability * 2.0 * style("crossing", nodes[k]))
        if k in incident and len(incident[k]) >= 3 and u < p_cw:
            crossing_nodes.add(k)

    for r in roads:
        if not r.divider:
            continue
        clear_a = node_r.get(r.a, 0.0) + (_CROSSING_DEPTH_M + 4.0 if r.a in crossing_nodes else 2.0)
        clear_b = node_r.get(r.b, 0.0) + (_CROSSING_DEPTH_M + 4.0 if r.b in crossing_nodes else 2.0)
        sub = _trim(r.pts, clear_a, clear_b)
        if sub is not None:
            paint.polyline(sub, _DIVIDER_M, DIVIDER)

    for k in sorted(crossing_nodes):
        for r in incident[k]:
            pts = r.pts if r.a == k else r.pts[::-1]
            d = pts[1] - pts[0]
            d = d / np.linalg.norm(d)
            w = _width(r, config)
            r0 = node_r[k] + 1.0
            c = nodes[k] + d * (r0 + _CROSSING_DEPTH_M / 2)
            paint.polygon(_rect(c, d, _CROSSING_DEPTH_M / 2, w / 2), CROSSING)
            # stop line on the approach (right-hand traffic) half, just upstream
            travel = -d
            right = np.array([travel[1], -travel[0]])
            c = nodes[k] + d * (r0 + _CROSSING_DEPTH_M + 1.0 + _STOP_LINE_M / 2) + right * (w / 4)
            paint.polygon(_rect(c, d, _STOP_LINE_M / 2, w / 4), STOP_LINE)

    raster = SemanticRaster(paint.img, spec.resolution)
    if not np.any(raster.classes == DRIVABLE):
        raise GenerationError("no drivable area inside the map extent")
    return raster


def _carparks(paint, roads, config, rng, style):
    if not roads or config.carpark_count == 0:
        return
    # roads in car-park-heavy districts are proportionally more likely hosts
    w = np.array([style("carpark", r.pts[len(r.pts) // 2]) for r in roads]) ** 3
    w = w / w.sum()
    for _ in range(config.carpark_count):
        r = roads[int(rng.choice(len(roads), p=w))]
        t = rng.uniform(0.25, 0.75)
        length, depth = rng.uniform(20.0, 45.0), rng.uniform(15.0, 35.0)
        side = 1.0 if rng.random() < 0.5 else -1.0
        k = min(int(t * (len(r.pts) - 1)), len(r.pts) - 2)
        p = r.pts[0] + t * (r.pts[-1] - r.pts[0]) if len(r.pts) == 2 else r.pts[k]
        d = r.pts[k + 1] - r.pts[k]
        d = d / np.linalg.norm(d)
        n = np.array([-d[1], d[0]]) * side
        off = _width(r, config) / 2 + r.walkway_m + 1.0 + depth / 2
        paint.polygon(_rect(p + n * off, d, length / 2, depth / 2), CARPARK, only_on=BACKGROUND)


def spawn_margin(window_m: float) -> float:
    """Distance from the border that keeps a rotated window inside the map."""
    return window_m / math.sqrt(2.0)


def sample_spawn_pose(raster: SemanticRaster, rng_seed: int, window_m: float = 100.0,
                      max_attempts: int = 10000) -> Pose2:
    """Uniform pose on drivable area, far enough from the border for any heading."""
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    res = raster.resolution
    ext_x, ext_y = raster.extent_m
    margin = spawn_margin(window_m)
    # pixel-centre bounds satisfying the margin
    j_lo = math.ceil(margin / res - 0.5)
    j_hi = math.floor((ext_x - margin) / res - 0.5)
    i_lo = math.ceil(margin / res - 0.5)
    i_hi = math.floor((ext_y - margin) / res - 0.5)
    if j_lo > j_hi or i_lo > i_hi:
        raise SpawnError(f"map too small for a {window_m} m observation window")
    cls = raster.classes
    theta = rng.uniform(-math.pi, math.pi)
    for _ in range(max_attempts):
        i = int(rng.integers(i_lo, i_hi + 1))
        j = int(rng.integers(j_lo, j_hi + 1))
        if cls[i, j] == DRIVABLE:
            break
    else:
        ii, jj = np.nonzero(cls[i_lo:i_hi + 1, j_lo:j_hi + 1] == DRIVABLE)
        if ii.size == 0:
            raise SpawnError("no drivable pixel clear of the map border")
        k = int(rng.integers(ii.size))
        i, j = int(ii[k]) + i_lo, int(jj[k]) + j_lo
    return Pose2((j + 0.5) * res, ext_y - (i + 0.5) * res, theta)
