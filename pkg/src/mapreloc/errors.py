"""Exception hierarchy shared by every stage of the pipeline."""


class MapRelocError(Exception):
    """Base class for all library errors."""


class OutOfMapError(MapRelocError, ValueError):
    """A query position left the map extent."""


class DegenerateProjectionError(MapRelocError, ArithmeticError):
    """Homogeneous coordinate vanished during a projective mapping."""


class GenerationError(MapRelocError):
    """Procedural map generation could not satisfy a constraint."""


class SpawnError(MapRelocError):
    """No eligible spawn pose could be sampled."""


class CalibrationError(MapRelocError):
    """A degradation profile cannot reach the requested quality."""


class TilingError(MapRelocError, ValueError):
    """Raster sides are not divisible by the token size."""


class ShapeError(MapRelocError, ValueError):
    """Tensor dimensions are inconsistent."""


class TrainingDivergedError(MapRelocError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, msg, epoch, batch, trace):
        super().__init__(f"{msg} (epoch={epoch}, batch={batch}, recent losses={trace})")
        self.epoch = epoch
        self.batch = batch
        self.trace = list(trace)


class InsufficientMatchesError(MapRelocError):
    """Too few keypoint correspondences to fit a homography."""


class AlignmentError(MapRelocError):
    """RANSAC found no model with enough inliers."""


class UndefinedMetricError(MapRelocError, ValueError):
    """A metric was requested over an empty sample set."""


class FormatError(MapRelocError):
    """A file does not match the expected on-disk format or version."""

    def __init__(self, what, expected, found):
        super().__init__(f"{what}: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class ConfigError(MapRelocError, ValueError):
    """Run configuration is missing inputs or fails validation."""
