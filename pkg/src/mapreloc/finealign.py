"""Fine alignment of an observation inside the 3x3 cell patch around a coarse hit.

Class-boundary corners are described by rotation-normalised
polar class histograms, matched mutually with a ratio test, and fed to a
RANSAC homography fit (normalised DLT, symmetric transfer error). Guided
re-matching grows the consensus set, and a dense ECC alignment of smoothed
class-level images polishes the final homography to sub-pixel accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter

from .errors import AlignmentError, InsufficientMatchesError
from .geom import (GridIndex, Homography, MapSpec, Pose2, apply_homography, cell_center,
                   homography_to_se2)
from .raster import N_CLASSES, SemanticRaster
from .sensorsim import Observation, ego_pixel

NMS_RADIUS = 5
MAX_KEYPOINTS = 512
RATIO = 0.85
ROT_TOL = math.radians(20.0)
GUIDED_RADIUS = 3.0
GUIDED_MIN_SCORE = 0.5
SEED_MIN_INLIERS = 6
GUIDED_ROUNDS = 3
# fraction of an ideal right-angle corner's response (see _corner_reference)
DETECT_FRACTION = 0.05
_EDGE_SIGMA = 0.7
_TENSOR_SIGMA = 1.0
_LEVEL_SIGMA = 1.5
_ORIENT_SIGMA = 6.0
_RINGS = (4.0, 8.0, 13.0, 19.0, 26.0, 34.0, 43.0, 52.0, 62.0)
_SECTORS = 12
_SUBSAMPLES = 3
_CLASS_LEVEL = np.array([0.0, 1.0, 0.55, 0.3, 0.8, 0.45, 0.9])
_DENSE_SIGMA = 1.5
_DENSE_ITERS = 100
_DENSE_EPS = 1e-6
# a dense update that moves the ego further than this is treated as divergence
_DENSE_MAX_SHIFT = 8.0

# single-threaded so ECC reductions are bit-for-bit reproducible
cv2.setNumThreads(1)


class Keypoint(NamedTuple):
    u: float
    v: float
    orientation: float
    strength: float


class Correspondence(NamedTuple):
    query_pt: tuple[float, float]
    patch_pt: tuple[float, float]
    score: float


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 1.5
    max_iterations: int = 2000
    confidence: float = 0.999
    min_inliers: int = 12

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.min_inliers < 4:
            raise ValueError("need max_iterations >= 1 and min_inliers >= 4")

    def to_dict(self) -> dict:
        return {"inlier_threshold": self.inlier_threshold, "max_iterations": self.max_iterations,
                "confidence": self.confidence, "min_inliers": self.min_inliers}


# --------------------------------------------------------------------------- patches


def patch_origin(center: GridIndex, spec: MapSpec) -> tuple[int, int]:
    """Map-pixel (u, v) of the patch's top-left corner."""
    return (center.col - 1) * spec.cell_px, (center.row - 1) * spec.cell_px


def extract_patch(map_raster: SemanticRaster, center: GridIndex,
                  spec: MapSpec = MapSpec()) -> SemanticRaster:
    """3x3 cell block around ``center``; cells beyond the map edge are background."""
    g = spec.grid_dim
    if not (0 <= center.row < g and 0 <= center.col < g):
        raise ValueError(f"cell {center} outside the {g}x{g} grid")
    side = 3 * spec.cell_px
    u0, v0 = patch_origin(center, spec)
    out = np.zeros((side, side), np.uint8)
    src = map_raster.classes
    r0, r1 = max(v0, 0), min(v0 + side, src.shape[0])
    c0, c1 = max(u0, 0), min(u0 + side, src.shape[1])
    out[r0 - v0:r1 - v0, c0 - u0:c1 - u0] = src[r0:r1, c0:c1]
    return SemanticRaster(out, map_raster.resolution)


# --------------------------------------------------------------------------- keypoints


def corner_response(classes: np.ndarray) -> np.ndarray:
    """Minimum eigenvalue of the structure tensor summed over smoothed class indicators.

    Gradients of the per-class indicators are non-zero only on class
    boundaries. Smoothing them isotropically (rather than thresholding a
    pixel-neighbour boundary mask) keeps corner positions covariant with
    rotation and silences the staircases left by nearest-class resampling.
    """
    sxx = np.zeros(classes.shape)
    syy = np.zeros(classes.shape)
    sxy = np.zeros(classes.shape)
    for c in np.unique(classes):
        ind = gaussian_filter((classes == c).astype(np.float64), _EDGE_SIGMA, mode="nearest")
        gy, gx = np.gradient(ind)
        sxx += gx * gx
        syy += gy * gy
        sxy += gx * gy
    sxx = gaussian_filter(sxx, _TENSOR_SIGMA, mode="nearest")
    syy = gaussian_filter(syy, _TENSOR_SIGMA, mode="nearest")
    sxy = gaussian_filter(sxy, _TENSOR_SIGMA, mode="nearest")
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))


_REF = None


def _corner_reference() -> float:
    global _REF
    if _REF is None:
        img = np.zeros((64, 64), np.uint8)
        img[32:, 32:] = 1
        _REF = float(corner_response(img).max())
    return _REF


def _orientations(classes, us, vs):
    """Direction of the window-weighted mean gradient of a class-level image.

    At a corner the two edge gradients add up to the bisector, which is far
    more stable under rotation and resampling than a histogram peak.
    """
    level = gaussian_filter(_CLASS_LEVEL[classes], _LEVEL_SIGMA, mode="nearest")
    gy, gx = np.gradient(level)
    h, w = classes.shape
    rad = int(3 * _ORIENT_SIGMA)
    oy, ox = np.mgrid[-rad:rad + 1, -rad:rad + 1]
    win = np.exp(-(ox ** 2 + oy ** 2) / (2 * _ORIENT_SIGMA ** 2))
    out = []
    for u, v in zip(us, vs):
        r, c = int(v), int(u)
        rr = np.clip(r + oy, 0, h - 1)
        cc = np.clip(c + ox, 0, w - 1)
        out.append(math.atan2(float((gy[rr, cc] * win).sum()), float((gx[rr, cc] * win).sum())))
    return out


def detect_keypoints(raster: SemanticRaster | np.ndarray,
                     max_keypoints: int = MAX_KEYPOINTS) -> list[Keypoint]:
    """Boundary corners with NMS, sub-pixel peaks and a dominant gradient orientation."""
    cls = raster.classes if isinstance(raster, SemanticRaster) else np.asarray(raster)
    resp = corner_response(cls)
    thr = DETECT_FRACTION * _corner_reference()
    size = 2 * NMS_RADIUS + 1
    peaks = (resp == maximum_filter(resp, size=size, mode="constant", cval=-np.inf)) & (resp > thr)
    rows, cols = np.nonzero(peaks)
    if rows.size == 0:
        return []
    strength = resp[rows, cols]
    order = np.lexsort((cols, rows, -strength))[:max_keypoints]
    rows, cols, strength = rows[order], cols[order], strength[order]
    h, w = cls.shape
    us, vs = [], []
    for r, c in zip(rows, cols):
        du = dv = 0.0
        if 0 < c < w - 1:
            a, b, d = resp[r, c - 1], resp[r, c], resp[r, c + 1]
            den = a - 2 * b + d
            du = 0.5 * (a - d) / den if den < 0 else 0.0
        if 0 < r < h - 1:
            a, b, d = resp[r - 1, c], resp[r, c], resp[r + 1, c]
            den = a - 2 * b + d
            dv = 0.5 * (a - d) / den if den < 0 else 0.0
        # pixel (r, c) centre sits at continuous (c + 0.5, r + 0.5)
        us.append(c + 0.5 + float(np.clip(du, -0.5, 0.5)))
        vs.append(r + 0.5 + float(np.clip(dv, -0.5, 0.5)))
    ori = _orientations(cls, us, vs)
    return [Keypoint(u, v, o, float(s)) for u, v, o, s in zip(us, vs, ori, strength)]


def describe_keypoints(raster: SemanticRaster | np.ndarray, kps: list[Keypoint]) -> np.ndarray:
    """Polar class histograms around each keypoint, rotated to its orientation."""
    cls = raster.classes if isinstance(raster, SemanticRaster) else np.asarray(raster)
    if not kps:
        return np.zeros((0, len(_RINGS) * _SECTORS * N_CLASSES))
    onehot = [gaussian_filter((cls == c).astype(np.float32), 1.0, mode="constant")
              for c in range(N_CLASSES)]
    n = len(kps)
    ang_off = (np.arange(_SECTORS * _SUBSAMPLES) + 0.5) / (_SECTORS * _SUBSAMPLES) * 2 * math.pi
    radii = np.asarray(_RINGS)
    u = np.array([k.u for k in kps])[:, None, None]
    v = np.array([k.v for k in kps])[:, None, None]
    o = np.array([k.orientation for k in kps])[:, None, None]
    a = o + ang_off[None, None, :]
    # continuous (u, v) -> array index (row = v - 0.5, col = u - 0.5)
    su = u + radii[None, :, None] * np.cos(a) - 0.5
    sv = v + radii[None, :, None] * np.sin(a) - 0.5
    coords = np.stack([sv.ravel(), su.ravel()])
    desc = np.empty((n, len(_RINGS), _SECTORS, N_CLASSES))
    for c in range(N_CLASSES):
        vals = map_coordinates(onehot[c], coords, order=1, mode="constant", cval=0.0)
        vals = vals.reshape(n, len(_RINGS), _SECTORS, _SUBSAMPLES).mean(axis=-1)
        desc[..., c] = vals
    # outer rings cover more area; weight rings equally
    desc = desc.reshape(n, -1)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    return desc / np.where(norm > 0, norm, 1.0)


def _mutual_matches(dq: np.ndarray, dp: np.ndarray, ratio: float):
    if len(dq) == 0 or len(dp) == 0:
        return []
    sim = dq @ dp.T
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    nn_q = np.argmin(dist, axis=1)
    nn_p = np.argmin(dist, axis=0)
    out = []
    for i, j in enumerate(nn_q):
        if nn_p[j] != i:
            continue
        d1 = dist[i, j]
        if dist.shape[1] > 1:
            d2 = np.partition(dist[i], 1)[1]
            if d2 > 0 and d1 / d2 >= ratio:
                continue
            if d2 == 0:
                continue
        out.append((i, int(j), float(np.clip(sim[i, j], 0.0, 1.0))))
    return out


def match_keypoints(query: SemanticRaster, patch: SemanticRaster,
                    ratio: float | None = None) -> list[Correspondence]:
    """Mutual nearest neighbours of rotation-normalised descriptors with a ratio test."""
    kq = detect_keypoints(query)
    kp = detect_keypoints(patch)
    return match_detected(query, kq, patch, kp, ratio)


def _rotation_consistent(pairs, kq, kp, tol=ROT_TOL):
    """Keep matches whose orientation change agrees with the dominant one."""
    if len(pairs) < 2:
        return pairs
    d = np.array([kp[j].orientation - kq[i].orientation for i, j, _ in pairs])
    # circular mode from a smoothed 72-bin histogram
    nb = 72
    bins = np.floor((np.mod(d, 2 * math.pi)) / (2 * math.pi) * nb).astype(int) % nb
    hist = np.bincount(bins, minlength=nb).astype(float)
    hist = hist + np.roll(hist, 1) + np.roll(hist, -1)
    mode = (int(np.argmax(hist)) + 0.5) / nb * 2 * math.pi
    dev = np.abs(np.angle(np.exp(1j * (d - mode))))
    return [p for p, e in zip(pairs, dev) if e <= tol]


def match_detected(query, kq, patch, kp, ratio: float | None = None,
                   descriptors=None) -> list[Correspondence]:
    """Match already-detected keypoints; see :func:`match_keypoints`."""
    dq, dp = descriptors or (describe_keypoints(query, kq), describe_keypoints(patch, kp))
    pairs = _mutual_matches(dq, dp, RATIO if ratio is None else ratio)
    pairs = _rotation_consistent(pairs, kq, kp)
    if len(pairs) < 4:
        raise InsufficientMatchesError(f"{len(pairs)} matches (need 4) from "
                                       f"{len(kq)}/{len(kp)} keypoints")
    return _corrs(pairs, kq, kp)


def _corrs(pairs, kq, kp):
    return [Correspondence((kq[i].u, kq[i].v), (kp[j].u, kp[j].v), s) for i, j, s in pairs]


def guided_matches(h: np.ndarray, kq, kp, dq, dp, radius: float | None = None,
                   min_score: float | None = None) -> list[Correspondence]:
    """Re-pair every query keypoint with the best patch keypoint near its projection.

    A candidate must lie within ``radius`` px of where ``h`` sends the query
    keypoint, turn by the same angle as ``h`` and clear ``min_score`` descriptor
    similarity. Each patch keypoint is used at most once (best score wins).
    """
    if not kq or not kp:
        return []
    radius = GUIDED_RADIUS if radius is None else radius
    min_score = GUIDED_MIN_SCORE if min_score is None else min_score
    q = np.array([(k.u, k.v) for k in kq])
    p = np.array([(k.u, k.v) for k in kp])
    proj = _project(h, q)
    rot = math.atan2(-h[0, 1] + h[1, 0], h[0, 0] + h[1, 1])
    oq = np.array([k.orientation for k in kq])
    op = np.array([k.orientation for k in kp])
    dist = np.sqrt(((proj[:, None, :] - p[None, :, :]) ** 2).sum(axis=2))
    turn = np.abs(np.angle(np.exp(1j * (op[None, :] - oq[:, None] - rot))))
    sim = dq @ dp.T
    ok = (dist <= radius) & (turn <= ROT_TOL) & (sim >= min_score)
    score = np.where(ok, sim, -np.inf)
    best = {}
    for i in range(len(kq)):
        j = int(np.argmax(score[i]))
        if np.isfinite(score[i, j]) and (j not in best or score[i, j] > best[j][1]):
            best[j] = (i, float(score[i, j]))
    pairs = sorted((i, j, min(s, 1.0)) for j, (i, s) in best.items())
    return _corrs(pairs, kq, kp)


# --------------------------------------------------------------------------- homography


def _normalising_transform(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares homography ``src -> dst`` with Hartley normalisation (None if degenerate)."""
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    n = len(src)
    if n < 4:
        return None
    t1 = _normalising_transform(src)
    t2 = _normalising_transform(dst)
    a = np.c_[src, np.ones(n)] @ t1.T
    b = np.c_[dst, np.ones(n)] @ t2.T
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    z, o = np.zeros(n), np.ones(n)
    m = np.empty((2 * n, 9))
    m[0::2] = np.c_[x, y, o, z, z, z, -u * x, -u * y, -u]
    m[1::2] = np.c_[z, z, z, x, y, o, -v * x, -v * y, -v]
    _, sv, vt = np.linalg.svd(m)
    if sv[7] < 1e-10 * sv[0]:
        return None
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    if abs(h[2, 2]) < 1e-12 or not np.all(np.isfinite(h)):
        return None
    h = h / h[2, 2]
    if not np.isfinite(np.linalg.cond(h)) or np.linalg.cond(h) > 1e12:
        return None
    return h


def _project(h, pts):
    q = pts @ h[:2, :2].T + h[:2, 2]
    w = pts @ h[2, :2] + h[2, 2]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return q / w[:, None]


def transfer_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error: RMS of forward and backward reprojection distances."""
    hi = np.linalg.inv(h)
    fwd = ((_project(h, src) - dst) ** 2).sum(axis=1)
    bwd = ((_project(hi, dst) - src) ** 2).sum(axis=1)
    return np.sqrt(0.5 * (fwd + bwd))


def _spread_ok(pts: np.ndarray) -> bool:
    """No three of the four sample points are (nearly) collinear."""
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-9)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < 1e-3 * scale * scale:
            return False
    return True


class RansacResult(NamedTuple):
    homography: Homography
    inliers: np.ndarray  # bool mask over the correspondences
    iterations: int


def ransac_homography(corrs, cfg: RansacConfig = RansacConfig(), rng_seed: int = 0,
                      accept: Callable[[np.ndarray], bool] | None = None) -> RansacResult:
    """Robust homography (query -> patch) from correspondences.

    ``corrs`` is a list of :class:`Correspondence` or an ``(src, dst)`` pair of
    (n, 2) arrays. ``accept`` may veto implausible hypotheses.
    """
    if isinstance(corrs, tuple) and len(corrs) == 2 and not isinstance(corrs[0], Correspondence):
        src, dst = (np.asarray(a, np.float64) for a in corrs)
    else:
        src = np.array([c.query_pt for c in corrs], np.float64).reshape(-1, 2)
        dst = np.array([c.patch_pt for c in corrs], np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise InsufficientMatchesError(f"{n} correspondences, need 4")
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    thr = cfg.inlier_threshold
    best_h, best_mask, best_cnt, best_err = None, None, 0, math.inf
    needed = cfg.max_iterations
    it = 0
    while it < min(cfg.max_iterations, needed):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if not (_spread_ok(src[idx]) and _spread_ok(dst[idx])):
            continue
        h = dlt_homography(src[idx], dst[idx])
        if h is None or (accept is not None and not accept(h)):
            continue
        err = transfer_errors(h, src, dst)
        mask = err < thr
        cnt = int(mask.sum())
        score = float(np.minimum(err, thr).sum())
        if cnt > best_cnt or (cnt == best_cnt and cnt > 0 and score < best_err):
            best_h, best_mask, best_cnt, best_err = h, mask, cnt, score
            # the confidence bound only means something once a valid model exists
            w = cnt / n
            if cnt >= cfg.min_inliers:
                if w >= 1.0:
                    needed = it
                else:
                    needed = math.ceil(math.log(1 - cfg.confidence) / math.log(1 - w ** 4))
    if best_mask is None or best_cnt < max(cfg.min_inliers, 4):
        raise AlignmentError(f"best model has {best_cnt} inliers (need {cfg.min_inliers}) "
                             f"after {it} iterations")
    h, mask = best_h, best_mask
    for _ in range(3):  # least-squares refit on the consensus set until it stabilises
        h_new = dlt_homography(src[mask], dst[mask])
        if h_new is None:
            break
        new_mask = transfer_errors(h_new, src, dst) < thr
        if new_mask.sum() < cfg.min_inliers:
            break
        h = h_new
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return RansacResult(Homography(h), mask, it)


def near_rigid(max_anisotropy: float = 0.15, scale_range=(0.85, 1.18), max_persp: float = 2e-3):
    """Hypothesis filter for same-resolution rasters: reject far-from-rigid models."""
    def check(h: np.ndarray) -> bool:
        a = h[:2, :2] / h[2, 2]
        if np.linalg.det(a) <= 0:
            return False
        sv = np.linalg.svd(a, compute_uv=False)
        if sv[1] <= 0 or sv[0] / sv[1] - 1 > max_anisotropy:
            return False
        s = math.sqrt(sv[0] * sv[1])
        return scale_range[0] <= s <= scale_range[1] and np.abs(h[2, :2] / h[2, 2]).max() <= max_persp
    return check


# --------------------------------------------------------------------------- pipeline


def refine_guided(h: np.ndarray, kq, kp, desc, cfg: RansacConfig):
    """Grow a seed model by guided matching and least-squares refits.

    Each round re-pairs keypoints around the current model's projections and
    refits on the pairs within ``GUIDED_RADIUS``. The result is scored with the
    configured inlier threshold and must reach ``cfg.min_inliers``.
    """
    corrs: list[Correspondence] = []
    for _ in range(GUIDED_ROUNDS):
        g = guided_matches(h, kq, kp, *desc)
        if len(g) < 4:
            break
        src = np.array([c.query_pt for c in g])
        dst = np.array([c.patch_pt for c in g])
        err = transfer_errors(h, src, dst)
        keep = err < GUIDED_RADIUS
        h_new = dlt_homography(src[keep], dst[keep]) if keep.sum() >= 4 else None
        if h_new is None:
            break
        h, corrs = h_new, g
    if not corrs:
        raise AlignmentError("guided matching found no support for the seed model")
    src = np.array([c.query_pt for c in corrs])
    dst = np.array([c.patch_pt for c in corrs])
    inliers = transfer_errors(h, src, dst) < cfg.inlier_threshold
    if inliers.sum() >= 4:
        h_fit = dlt_homography(src[inliers], dst[inliers])
        if h_fit is not None:
            h = h_fit
            inliers = transfer_errors(h, src, dst) < cfg.inlier_threshold
    if int(inliers.sum()) < cfg.min_inliers:
        raise AlignmentError(f"{int(inliers.sum())} inliers after guided matching "
                             f"(need {cfg.min_inliers})")
    return h, corrs, inliers



@dataclass
class FineResult:
    pose: Pose2
    fallback: bool
    inliers: int = 0
    matches: int = 0
    rms_px: float = float("nan")
    nonrigid: bool = False
    reason: str = ""
    homography: Homography | None = field(default=None, repr=False)

    def diagnostics(self, truth: Pose2 | None = None) -> dict:
        d = {"inliers": self.inliers, "rms_px": None if math.isnan(self.rms_px) else self.rms_px,
             "fallback": self.fallback, "est_pose": self.pose.as_list(),
             "truth_pose": truth.as_list() if truth is not None else None}
        if self.reason:
            d["reason"] = self.reason
        return d


def _level_image(classes: np.ndarray) -> np.ndarray:
    return gaussian_filter(_CLASS_LEVEL[classes].astype(np.float32), _DENSE_SIGMA)


# continuous pixel coordinates sit half a pixel off OpenCV's index coordinates
_HALF = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
_HALF_INV = np.linalg.inv(_HALF)


def refine_dense(h: np.ndarray, query: np.ndarray, patch: np.ndarray,
                 anchor: tuple[float, float] | None = None) -> tuple[np.ndarray, bool]:
    """ECC-maximising homography between smoothed class-level images.

    Returns ``(h, True)`` on success and the input with ``False`` when ECC
    fails to converge or moves ``anchor`` by more than ``_DENSE_MAX_SHIFT`` px.
    """
    w = _HALF_INV @ h @ _HALF
    w = (w / w[2, 2]).astype(np.float32)
    crit = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, _DENSE_ITERS, _DENSE_EPS)
    try:
        _, w = cv2.findTransformECC(_level_image(query), _level_image(patch), w,
                                    cv2.MOTION_HOMOGRAPHY, crit, None, 1)
    except cv2.error:
        return h, False
    out = _HALF @ w.astype(np.float64) @ _HALF_INV
    out /= out[2, 2]
    if not np.all(np.isfinite(out)):
        return h, False
    if anchor is not None:
        a = np.array([anchor])
        if np.hypot(*(_project(out, a) - _project(h, a))[0]) > _DENSE_MAX_SHIFT:
            return h, False
    return out, True


def fallback_pose(coarse: GridIndex, spec: MapSpec) -> Pose2:
    x, y = cell_center(coarse, spec)
    return Pose2(x, y, 0.0)


def localize_fine(obs: Observation | SemanticRaster, map_raster: SemanticRaster, coarse: GridIndex,
                  spec: MapSpec = MapSpec(), cfg: RansacConfig = RansacConfig(),
                  rng_seed: int = 0) -> FineResult:
    """Pose from the observation's ego pixel projected into the retrieved patch.

    Failures (too few matches, no consensus, projection outside the patch)
    return the coarse cell centre with ``fallback=True``.
    """
    raster = obs.raster if isinstance(obs, Observation) else obs
    patch = extract_patch(map_raster, coarse, spec)
    kq = detect_keypoints(raster)
    kp = detect_keypoints(patch)
    fb = fallback_pose(coarse, spec)
    desc = (describe_keypoints(raster, kq), describe_keypoints(patch, kp))
    accept = near_rigid()
    try:
        corrs = match_detected(raster, kq, patch, kp, descriptors=desc)
        # a loose seed model, then guided re-matching and the real consensus test
        seed_cfg = replace(cfg, min_inliers=min(cfg.min_inliers, SEED_MIN_INLIERS))
        seed = ransac_homography(corrs, seed_cfg, rng_seed, accept=accept)
        h, corrs, inliers = refine_guided(seed.homography.matrix, kq, kp, desc, cfg)
    except (InsufficientMatchesError, AlignmentError) as exc:
        return FineResult(fb, True, reason=type(exc).__name__)
    cu, cv = ego_pixel(raster.width)
    h, _ = refine_dense(h, raster.classes, patch.classes, anchor=(cu, cv))
    h = Homography(h)
    src = np.array([c.query_pt for c in corrs])
    dst = np.array([c.patch_pt for c in corrs])
    err = np.sqrt(((_project(h.matrix, src[inliers]) - dst[inliers]) ** 2).sum(axis=1))
    rms = float(np.sqrt(np.mean(err ** 2)))
    pu, pv = apply_homography(h, cu, cv)
    side = patch.width
    n_in = int(inliers.sum())
    if not (0.0 <= pu < side and 0.0 <= pv < side):
        return FineResult(fb, True, n_in, len(corrs), rms, reason="outside_patch", homography=h)
    u0, v0 = patch_origin(coarse, spec)
    x = (pu + u0) * spec.resolution
    y = spec.extent_m - (pv + v0) * spec.resolution
    rigid = homography_to_se2(h, spec.resolution)
    return FineResult(Pose2(x, y, rigid.pose.theta), False, n_in, len(corrs), rms,
                      rigid.nonrigid, homography=h)
