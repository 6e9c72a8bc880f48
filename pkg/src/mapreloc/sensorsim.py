"""Ego-centric BEV observations rendered from a base map, plus parametric degradation.

The observation window is the ego frame drawn with the ego x axis pointing
to the image right and the ego y axis pointing up, so a heading of 0 gives
the axis-aligned crop of the map. The ego sits at the centre of pixel
``(window_px // 2, window_px // 2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CalibrationError
from .geom import Homography, MapSpec, Pose2
from .raster import BACKGROUND, N_CLASSES, SemanticRaster, dataset_miou

CONTEXTS = ("day", "night", "rain", "clean")

_JITTER_SMOOTH_PX = 6.0
_MAX_FLIP = 0.5


@dataclass(frozen=True)
class ContextProfile:
    name: str = "clean"
    flip_rate: float = 0.0
    boundary_jitter: float = 0.0
    dropout_blob_rate: float = 0.0
    dropout_blob_radius: float = 0.0
    target_iou: float = 1.0

    def __post_init__(self):
        if self.name not in CONTEXTS:
            raise ValueError(f"unknown context {self.name!r}")
        for k in ("flip_rate", "boundary_jitter", "dropout_blob_rate", "dropout_blob_radius"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.flip_rate > 1:
            raise ValueError("flip_rate must not exceed 1")
        if not 0.0 < self.target_iou <= 1.0:
            raise ValueError("target_iou must lie in (0, 1]")

    @property
    def is_clean(self) -> bool:
        return (self.flip_rate == 0 and self.boundary_jitter == 0
                and self.dropout_blob_rate == 0)

    def to_dict(self) -> dict:
        return {"name": self.name, "flip_rate": self.flip_rate,
                "boundary_jitter": self.boundary_jitter,
                "dropout_blob_rate": self.dropout_blob_rate,
                "dropout_blob_radius": self.dropout_blob_radius,
                "target_iou": self.target_iou}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextProfile":
        return cls(**d)


# Structural knobs per context; flip_rate is left to calibration.
# Rain blurs edges (jitter), night loses structure (blob dropout).
PRESETS = {
    "clean": ContextProfile("clean"),
    "day": ContextProfile("day", 0.0, 0.4, 0.5, 10.0),
    "night": ContextProfile("night", 0.0, 0.4, 4.0, 20.0),
    "rain": ContextProfile("rain", 0.0, 0.8, 0.5, 10.0),
}


@dataclass(frozen=True, eq=False)
class Observation:
    raster: SemanticRaster
    context: str = "clean"
    truth_pose: Pose2 | None = None
    truncated: bool = False
    meta: dict = field(default_factory=dict)


def ego_pixel(window_px: int) -> tuple[float, float]:
    """Continuous pixel coordinates of the ego position inside an observation."""
    c = window_px // 2 + 0.5
    return c, c


def obs_to_map_homography(pose: Pose2, spec: MapSpec, window_px: int | None = None) -> Homography:
    """Observation pixel -> map pixel for an ego at ``pose``."""
    n = spec.window_px if window_px is None else window_px
    cu, cv = ego_pixel(n)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    u0 = pose.x / spec.resolution
    v0 = (spec.extent_m - pose.y) / spec.resolution
    return Homography([[c, s, u0 - c * cu - s * cv],
                       [-s, c, v0 + s * cu - c * cv],
                       [0.0, 0.0, 1.0]])


def resample_nearest(src: np.ndarray, h: Homography, shape: tuple[int, int]):
    """Nearest-class lookup of ``src`` at ``h`` applied to every output pixel centre.

    Returns the resampled array and a mask of output pixels that fell outside ``src``.
    """
    rows, cols = shape
    jj, ii = np.meshgrid(np.arange(cols) + 0.5, np.arange(rows) + 0.5)
    m = h.matrix
    w = m[2, 0] * jj + m[2, 1] * ii + m[2, 2]
    u = (m[0, 0] * jj + m[0, 1] * ii + m[0, 2]) / w
    v = (m[1, 0] * jj + m[1, 1] * ii + m[1, 2]) / w
    c = np.floor(u).astype(np.int64)
    r = np.floor(v).astype(np.int64)
    inside = (r >= 0) & (r < src.shape[0]) & (c >= 0) & (c < src.shape[1])
    out = np.zeros(shape, np.uint8)
    out[inside] = src[r[inside], c[inside]]
    return out, ~inside


def render_observation(map_raster: SemanticRaster, pose: Pose2, spec: MapSpec = MapSpec(),
                       context: str = "clean") -> Observation:
    n = spec.window_px
    h = obs_to_map_homography(pose, spec)
    out, outside = resample_nearest(map_raster.classes, h, (n, n))
    return Observation(SemanticRaster(out, spec.resolution), context, pose, bool(outside.any()))


class _Stages:
    """Flip-independent part of a degradation, reusable across flip rates."""

    def __init__(self, classes: np.ndarray, profile: ContextProfile, rng_seed: int):
        jit_ss, blob_ss, flip_ss = np.random.SeedSequence(rng_seed).spawn(3)
        out = _jitter(classes, profile.boundary_jitter, np.random.default_rng(jit_ss))
        _blobs(out, profile.dropout_blob_rate, profile.dropout_blob_radius,
               np.random.default_rng(blob_ss))
        self.base = out
        rng = np.random.default_rng(flip_ss)
        self.u = rng.random(classes.shape, dtype=np.float32)
        self.shift = rng.integers(1, N_CLASSES, classes.shape, dtype=np.uint8)

    def flipped(self, flip_rate: float) -> np.ndarray:
        if flip_rate <= 0:
            return self.base.copy()
        out = self.base.copy()
        m = self.u < flip_rate
        out[m] = (out[m] + self.shift[m]) % N_CLASSES
        return out


def _jitter(classes, amount, rng):
    h, w = classes.shape
    noise = rng.standard_normal((2, h, w))
    if amount <= 0:
        return classes.copy()
    field_ = np.stack([gaussian_filter(noise[k], _JITTER_SMOOTH_PX, mode="wrap") for k in range(2)])
    field_ *= amount / (field_.std(axis=(1, 2), keepdims=True) + 1e-12)
    ii, jj = np.mgrid[0:h, 0:w]
    r = np.clip(np.rint(ii + field_[0]), 0, h - 1).astype(np.intp)
    c = np.clip(np.rint(jj + field_[1]), 0, w - 1).astype(np.intp)
    return classes[r, c]


def _blobs(out, rate, radius, rng):
    if rate <= 0 or radius <= 0:
        return
    h, w = out.shape
    k = int(rng.poisson(rate))
    if k == 0:
        return
    ii, jj = np.mgrid[0:h, 0:w]
    for _ in range(k):
        ci, cj = rng.uniform(0, h), rng.uniform(0, w)
        r = radius * rng.uniform(0.75, 1.25)
        out[(ii + 0.5 - ci) ** 2 + (jj + 0.5 - cj) ** 2 <= r * r] = BACKGROUND


def degrade(obs: Observation, profile: ContextProfile, rng_seed: int) -> Observation:
    """Boundary jitter, then blob dropout, then i.i.d. class flips."""
    if profile.is_clean:
        return replace(obs, context=profile.name)
    st = _Stages(obs.raster.classes, profile, rng_seed)
    out = st.flipped(profile.flip_rate)
    return replace(obs, raster=SemanticRaster(out, obs.raster.resolution), context=profile.name)


def calibration_observations(spec: MapSpec, seeds: int, map_seed: int = 1000,
                             n_maps: int = 8) -> list[Observation]:
    """Clean observations at spawn poses on default maps, used to fit flip rates."""
    from .worldgen import WorldGenConfig, generate_map, sample_spawn_pose
    maps = [generate_map(WorldGenConfig(seed=map_seed + k), spec) for k in range(n_maps)]
    obs = []
    for s in range(seeds):
        m = maps[s % n_maps]
        pose = sample_spawn_pose(m, map_seed * 7919 + s, spec.window_m)
        obs.append(render_observation(m, pose, spec))
    return obs


def calibrate_profile(target_iou: float, spec: MapSpec = MapSpec(), seeds: int = 200,
                      context: str = "day", observations: list[Observation] | None = None,
                      tol: float = 0.002, seed_base: int = 0) -> ContextProfile:
    """Binary-search ``flip_rate`` so the mIoU over ``seeds`` observations hits the target.

    Only ``flip_rate`` moves; jitter and blob knobs come from the context preset.
    The flip stage uses common random numbers across rates, so the search sees a
    monotone response.
    """
    if not 0.3 < target_iou <= 1.0:
        raise CalibrationError(f"target_iou {target_iou} outside (0.3, 1]")
    preset = PRESETS[context]
    if target_iou >= 1.0:
        return ContextProfile(context if context != "clean" else "clean", target_iou=1.0)
    if observations is None:
        observations = calibration_observations(spec, seeds)
    probe = replace(preset, flip_rate=0.0, target_iou=target_iou)
    stages = [_Stages(o.raster.classes, probe, seed_base + k) for k, o in enumerate(observations)]
    refs = [o.raster.classes for o in observations]

    def score(f):
        return dataset_miou((s.flipped(f), r) for s, r in zip(stages, refs))

    hi_iou, lo_iou = score(0.0), score(_MAX_FLIP)
    if not lo_iou - tol <= target_iou <= hi_iou + tol:
        raise CalibrationError(
            f"{context}: target IoU {target_iou:.3f} unreachable; achievable range "
            f"[{lo_iou:.3f}, {hi_iou:.3f}]")
    lo, hi = 0.0, _MAX_FLIP
    f = 0.0 if abs(hi_iou - target_iou) <= tol else None
    for _ in range(40):
        if f is not None:
            break
        mid = 0.5 * (lo + hi)
        m = score(mid)
        if abs(m - target_iou) <= tol:
            f = mid
        elif m > target_iou:
            lo = mid
        else:
            hi = mid
    if f is None:
        f = 0.5 * (lo + hi)
    return replace(probe, flip_rate=float(f))
