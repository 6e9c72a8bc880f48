"""Planar pose algebra, map/grid/pixel conversions and homography helpers.

Frame conventions used throughout the package:

* Map frame: origin at the south-west corner of the map, x east, y north,
  metres.
* Raster frame: continuous pixel coordinates ``(u, v)`` with ``u`` to the
  right and ``v`` downwards; pixel ``(row=i, col=j)`` covers
  ``[j, j+1) x [i, i+1)``, so raster row 0 is the north edge.
* A pixel-space homography built from a pose maps pixel coordinates of a
  child raster into pixel coordinates of its parent raster (both at the same
  resolution, origins coincident before the pose is applied).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateProjectionError, OutOfMapError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose of the ego vehicle in the map frame."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def transform_point(self, px: float, py: float) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.theta]

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return se2_compose(self, other)


def se2_compose(a: Pose2, b: Pose2) -> Pose2:
    """Return ``a o b`` (b expressed in a's frame, lifted to a's parent)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def se2_inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def se2_between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose of ``b`` seen from ``a``."""
    return se2_compose(se2_inverse(a), b)


@dataclass(frozen=True)
class MapSpec:
    """Metric geometry of the base map, the coarse grid and the observation window."""

    extent_m: float = 500.0
    resolution: float = 0.5
    grid_dim: int = 10
    window_m: float = 100.0

    def __post_init__(self):
        side = self.extent_m / self.resolution
        if self.extent_m <= 0 or self.resolution <= 0 or abs(side - round(side)) > 1e-9:
            raise ValueError(f"extent_m/resolution must be a positive integer, got {side}")
        win = self.window_m / self.resolution
        if self.window_m <= 0 or abs(win - round(win)) > 1e-9:
            raise ValueError(f"window_m/resolution must be a positive integer, got {win}")
        if self.grid_dim < 1 or round(side) % self.grid_dim:
            raise ValueError("grid_dim must divide the raster side")

    @property
    def size_px(self) -> int:
        return int(round(self.extent_m / self.resolution))

    @property
    def window_px(self) -> int:
        return int(round(self.window_m / self.resolution))

    @property
    def cell_m(self) -> float:
        return self.extent_m / self.grid_dim

    @property
    def cell_px(self) -> int:
        return self.size_px // self.grid_dim

    @property
    def n_cells(self) -> int:
        return self.grid_dim * self.grid_dim

    def to_dict(self) -> dict:
        return {"extent_m": self.extent_m, "resolution": self.resolution,
                "grid_dim": self.grid_dim, "window_m": self.window_m}

    @classmethod
    def from_dict(cls, d: dict) -> "MapSpec":
        return cls(float(d["extent_m"]), float(d["resolution"]), int(d["grid_dim"]),
                   float(d["window_m"]))


class GridIndex(NamedTuple):
    row: int
    col: int

    def flat(self, grid_dim: int) -> int:
        return self.row * grid_dim + self.col

    @classmethod
    def from_flat(cls, k: int, grid_dim: int) -> "GridIndex":
        return cls(int(k) // grid_dim, int(k) % grid_dim)

    def chebyshev(self, other: "GridIndex") -> int:
        return max(abs(self.row - other.row), abs(self.col - other.col))


def world_to_cell(x: float, y: float, spec: MapSpec) -> GridIndex:
    if not (0.0 <= x < spec.extent_m and 0.0 <= y < spec.extent_m):
        raise OutOfMapError(f"position ({x:.3f}, {y:.3f}) left the {spec.extent_m} m map")
    g = spec.grid_dim
    col = min(max(math.floor(x / spec.cell_m), 0), g - 1)
    row = min(max(math.floor((spec.extent_m - y) / spec.cell_m), 0), g - 1)
    return GridIndex(int(row), int(col))


def cell_center(idx: GridIndex, spec: MapSpec) -> tuple[float, float]:
    """Map-frame centre of a grid cell in metres."""
    return (idx.col + 0.5) * spec.cell_m, spec.extent_m - (idx.row + 0.5) * spec.cell_m


def world_to_pixel(x, y, spec: MapSpec):
    return np.asarray(x) / spec.resolution, (spec.extent_m - np.asarray(y)) / spec.resolution


def pixel_to_world(u, v, spec: MapSpec):
    return np.asarray(u) * spec.resolution, spec.extent_m - np.asarray(v) * spec.resolution


class Homography:
    """3x3 projective transform, normalised to ``H[2, 2] == 1`` when possible."""

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        else:
            m = m / np.linalg.norm(m)
        if not np.isfinite(np.linalg.cond(m)):
            raise ValueError("homography is singular")
        m.setflags(write=False)
        self._m = m

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self._m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self._m @ other._m)

    def __repr__(self):
        return f"Homography({self._m.tolist()})"


def apply_homography(h: Homography, u, v):
    """Perspective-divided image of pixel(s) ``(u, v)`` under ``h``."""
    m = h.matrix
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = m[2, 0] * u + m[2, 1] * v + m[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateProjectionError("homogeneous coordinate vanished")
    pu = (m[0, 0] * u + m[0, 1] * v + m[0, 2]) / w
    pv = (m[1, 0] * u + m[1, 1] * v + m[1, 2]) / w
    if pu.ndim == 0:
        return float(pu), float(pv)
    return pu, pv


def se2_to_homography(pose: Pose2, resolution: float) -> Homography:
    """Pixel-space homography of a rigid motion (child pixels -> parent pixels)."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return Homography([[c, s, pose.x / resolution],
                       [-s, c, -pose.y / resolution],
                       [0.0, 0.0, 1.0]])


class RigidPose(NamedTuple):
    pose: Pose2
    anisotropy: float
    nonrigid: bool


NONRIGID_TOLERANCE = 0.03


def homography_to_se2(h: Homography, resolution: float,
                      tol: float = NONRIGID_TOLERANCE) -> RigidPose:
    """Closest rigid motion to ``h``; flags blocks that are not a scaled rotation.

    The rotation comes from the polar decomposition of the upper-left 2x2
    block. ``anisotropy`` is ``s_max / s_min - 1`` of that block.
    """
    m = h.matrix
    if abs(m[2, 2]) < 1e-12:
        raise DegenerateProjectionError("homography maps the origin to infinity")
    m = m / m[2, 2]
    a = m[:2, :2]
    u, sv, vt = np.linalg.svd(a)
    r = u @ vt
    reflect = np.linalg.det(r) < 0
    anis = float(sv[0] / sv[1] - 1.0) if sv[1] > 0 else math.inf
    theta = math.atan2(r[0, 1], r[0, 0])
    pose = Pose2(m[0, 2] * resolution, -m[1, 2] * resolution, theta)
    return RigidPose(pose, anis, bool(reflect or anis > tol))
