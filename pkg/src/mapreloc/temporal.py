"""Multi-frame queries: short driven trajectories and their composite raster.

Odometry ``rel_odometry[i]`` is the pose of frame ``i + 1`` expressed in the
ego frame of frame ``i``, so truth poses chain as
``pose[i + 1] = pose[i] @ rel_odometry[i]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SpawnError
from .geom import Homography, MapSpec, Pose2, se2_compose, se2_inverse
from .raster import BACKGROUND, N_CLASSES, SemanticRaster
from .sensorsim import ContextProfile, Observation, degrade, ego_pixel, render_observation, resample_nearest
from .worldgen import spawn_margin

FRAME_COUNTS = (1, 2, 4, 8)
DEFAULT_DT = 0.5
DEFAULT_SPEED = 10.0
ODO_XY_STD = 0.05
ODO_THETA_STD = math.radians(0.2)
# curvature random walk, 1/m
_MAX_CURVATURE = 0.02
_CURVATURE_STEP = 0.004


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: tuple[Observation, ...]
    rel_odometry: tuple[Pose2, ...] = ()
    dt: float = DEFAULT_DT
    truth_poses: tuple[Pose2, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "rel_odometry", tuple(self.rel_odometry))
        if len(self.frames) not in FRAME_COUNTS:
            raise ValueError(f"frame count must be one of {FRAME_COUNTS}, got {len(self.frames)}")
        if len(self.rel_odometry) != len(self.frames) - 1:
            raise ValueError("need exactly one odometry step between consecutive frames")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def latest(self) -> Observation:
        return self.frames[-1]

    def tail(self, n: int) -> "FrameSequence":
        """The ``n`` most recent frames."""
        k = len(self.frames) - n
        if k < 0:
            raise ValueError(f"sequence has only {len(self.frames)} frames")
        truth = self.truth_poses[k:] if self.truth_poses is not None else None
        return FrameSequence(self.frames[k:], self.rel_odometry[k:], self.dt, truth)


def poses_in_latest(rel_odometry) -> list[Pose2]:
    """Pose of every frame in the latest frame's ego frame, oldest first."""
    out = [Pose2.identity()]
    acc = Pose2.identity()
    for step in reversed(rel_odometry):
        acc = se2_compose(step, acc)
        out.append(se2_inverse(acc))
    return out[::-1]


def _ego_to_pixel(window_px: int, res: float) -> np.ndarray:
    cu, cv = ego_pixel(window_px)
    return np.array([[1.0 / res, 0.0, cu], [0.0, -1.0 / res, cv], [0.0, 0.0, 1.0]])


def fuse_frames(seq: FrameSequence) -> Observation:
    """Composite every frame onto the latest frame's canvas by per-pixel class vote.

    Ties go to the most recent frame; pixels no frame observed stay background.
    """
    latest = seq.latest
    if len(seq.frames) == 1:
        return latest
    n = latest.raster.width
    res = latest.raster.resolution
    e = _ego_to_pixel(n, res)
    e_inv = np.linalg.inv(e)
    labels = []
    for frame, pose in zip(seq.frames, poses_in_latest(seq.rel_odometry)):
        h = Homography(e @ se2_inverse(pose).matrix() @ e_inv)
        out, outside = resample_nearest(frame.raster.classes, h, (n, n))
        labels.append(np.where(outside, N_CLASSES, out))  # N_CLASSES marks "unseen"
    stack = np.stack(labels)
    counts = np.stack([(stack == c).sum(axis=0) for c in range(N_CLASSES)])
    best = counts.max(axis=0)
    fused = np.full((n, n), BACKGROUND, np.uint8)
    done = best == 0
    for lab in reversed(labels):
        seen = lab < N_CLASSES
        cnt = np.take_along_axis(counts, np.where(seen, lab, 0)[None].astype(np.intp), 0)[0]
        take = ~done & seen & (cnt == best)
        fused[take] = lab[take]
        done |= take
    return Observation(SemanticRaster(fused, res), latest.context, latest.truth_pose,
                       latest.truncated, dict(latest.meta, fused_frames=len(seq.frames)))


def _inside(pose: Pose2, lo: float, hi_x: float, hi_y: float) -> bool:
    return lo <= pose.x <= hi_x and lo <= pose.y <= hi_y


def _arc(ds: float, dtheta: float) -> Pose2:
    # chord of a circular arc; the chord length equals ds exactly
    return Pose2(ds * math.cos(dtheta / 2), ds * math.sin(dtheta / 2), dtheta)


def simulate_trajectory(map_raster: SemanticRaster, start: Pose2, n_frames: int,
                        speed: float = DEFAULT_SPEED, rng_seed: int = 0,
                        spec: MapSpec = MapSpec(), dt: float = DEFAULT_DT,
                        odo_xy_std: float = ODO_XY_STD, odo_theta_std: float = ODO_THETA_STD,
                        profile: ContextProfile | None = None, anchor: str = "first",
                        max_retries: int = 50) -> FrameSequence:
    """Constant-speed drive with a bounded random-walk curvature.

    ``anchor="first"`` starts the drive at ``start``; ``anchor="last"`` ends it
    there, so the newest frame sits at ``start``. When the drive leaves the
    spawn margin the heading is redrawn, up to ``max_retries`` times.
    Frames are degraded with ``profile`` when given.
    """
    if n_frames not in FRAME_COUNTS:
        raise ValueError(f"n_frames must be one of {FRAME_COUNTS}")
    if anchor not in ("first", "last"):
        raise ValueError("anchor must be 'first' or 'last'")
    if speed < 0:
        raise ValueError("speed must be non-negative")
    ss = np.random.SeedSequence(rng_seed)
    walk_ss, noise_ss, deg_ss = ss.spawn(3)
    walk = np.random.default_rng(walk_ss)
    ext_x, ext_y = map_raster.extent_m
    lo = spawn_margin(spec.window_m)
    ds = speed * dt
    poses = None
    origin = start
    for _ in range(max_retries + 1):
        steps = []
        kappa = walk.uniform(-_MAX_CURVATURE, _MAX_CURVATURE)
        for _ in range(n_frames - 1):
            steps.append(_arc(ds, kappa * ds))
            kappa = float(np.clip(kappa + walk.normal(0.0, _CURVATURE_STEP),
                                  -_MAX_CURVATURE, _MAX_CURVATURE))
        chain = [origin]
        for st in steps:
            nxt = se2_compose(chain[-1], st if anchor == "first" else se2_inverse(st))
            chain.append(nxt)
        if all(_inside(p, lo, ext_x - lo, ext_y - lo) for p in chain):
            poses = chain if anchor == "first" else chain[::-1]
            break
        origin = Pose2(start.x, start.y, walk.uniform(-math.pi, math.pi))
    if poses is None:
        raise SpawnError(f"trajectory left the spawn margin after {max_retries} retries")

    noise = np.random.default_rng(noise_ss)
    odo = []
    for a, b in zip(poses[:-1], poses[1:]):
        rel = se2_compose(se2_inverse(a), b)
        eps = noise.normal(0.0, 1.0, 3) * (odo_xy_std, odo_xy_std, odo_theta_std)
        if odo_xy_std or odo_theta_std:
            rel = se2_compose(rel, Pose2(*eps))
        odo.append(rel)

    deg_seeds = deg_ss.generate_state(n_frames)
    frames = []
    for k, p in enumerate(poses):
        obs = render_observation(map_raster, p, spec)
        if profile is not None:
            obs = degrade(obs, profile, int(deg_seeds[k]))
        frames.append(obs)
    return FrameSequence(tuple(frames), tuple(odo), dt, tuple(poses))
