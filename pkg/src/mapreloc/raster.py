"""Class-indexed semantic rasters and the IoU shared by simulation and evaluation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

BACKGROUND = 0
DRIVABLE = 1
CROSSING = 2
WALKWAY = 3
STOP_LINE = 4
CARPARK = 5
DIVIDER = 6
N_CLASSES = 7

CLASS_NAMES = ("background", "drivable_area", "ped_crossing", "walkway",
               "stop_line", "carpark_area", "divider")

# RGB per class index; fixed project-wide
PALETTE = (
    (255, 255, 255),
    (166, 206, 227),
    (251, 154, 153),
    (178, 223, 138),
    (227, 26, 28),
    (253, 191, 111),
    (106, 61, 154),
)


@dataclass(frozen=True, eq=False)
class SemanticRaster:
    """Per-pixel class indices (uint8, row 0 = north) at a fixed metric resolution."""

    classes: np.ndarray
    resolution: float = 0.5

    def __post_init__(self):
        a = np.ascontiguousarray(self.classes, dtype=np.uint8)
        if a.ndim != 2:
            raise ValueError(f"raster must be 2-D, got shape {a.shape}")
        if a.size and a.max() >= N_CLASSES:
            raise ValueError(f"class index {int(a.max())} outside 0..{N_CLASSES - 1}")
        a.setflags(write=False)
        object.__setattr__(self, "classes", a)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def extent_m(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.height, self.width], dtype="<i4").tobytes())
        h.update(np.float64(self.resolution).tobytes())
        h.update(self.classes.tobytes())
        return h.hexdigest()

    def class_fraction(self, cls: int) -> float:
        return float(np.count_nonzero(self.classes == cls)) / self.classes.size

    def __eq__(self, other):
        if not isinstance(other, SemanticRaster):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.classes, other.classes)

    __hash__ = None


def confusion(pred, ref) -> np.ndarray:
    """7x7 pixel confusion counts, rows = reference class, columns = predicted class."""
    pred = pred.classes if isinstance(pred, SemanticRaster) else np.asarray(pred)
    ref = ref.classes if isinstance(ref, SemanticRaster) else np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    idx = ref.astype(np.int64).ravel() * N_CLASSES + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


def iou_from_confusion(conf: np.ndarray) -> dict[int, float]:
    """IoU of every foreground class whose union is non-empty."""
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    return {c: float(tp[c] / union[c]) for c in range(1, N_CLASSES) if union[c]}


def per_class_iou(pred, ref) -> dict[int, float]:
    return iou_from_confusion(confusion(pred, ref))


def mean_iou(pred, ref) -> float:
    """Mean foreground IoU of one raster pair (1.0 when no foreground on either side)."""
    ious = per_class_iou(pred, ref)
    return float(np.mean(list(ious.values()))) if ious else 1.0


def dataset_miou(pairs) -> float:
    """Mean foreground IoU with intersections and unions accumulated over all pairs.

    This is the usual segmentation benchmark figure; per-pair averaging would be
    dominated by a handful of false positives for classes absent from a window.
    """
    total = np.zeros((N_CLASSES, N_CLASSES), np.int64)
    for pred, ref in pairs:
        total += confusion(pred, ref)
    ious = iou_from_confusion(total)
    return float(np.mean(list(ious.values()))) if ious else 1.0
