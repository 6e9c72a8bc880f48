"""End-to-end localisation of one query raster: coarse retrieval, then fine alignment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .descriptor import DEFAULT_DIM, DEFAULT_TOKEN_PX, base_grid_for, tokenize
from .finealign import FineResult, RansacConfig, localize_fine
from .geom import GridIndex, Homography, MapSpec
from .raster import SemanticRaster
from .retrieval import RetrievalParams, forward, top_cells
from .sensorsim import Observation, ego_pixel, resample_nearest


@dataclass(frozen=True)
class LocalizerConfig:
    rotations: int = 1          # >1 enables rotation-max scoring
    token_px: int = DEFAULT_TOKEN_PX
    proj_seed: int = 0
    dim: int = DEFAULT_DIM
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.rotations < 1:
            raise ValueError("rotations must be >= 1")


@dataclass(frozen=True, eq=False)
class Localization:
    coarse: GridIndex
    logits: np.ndarray
    fine: FineResult

    @property
    def pose(self):
        return self.fine.pose


def rotate_about_ego(raster: SemanticRaster, angle: float) -> SemanticRaster:
    """Nearest-class rotation of an observation about its ego pixel (counter-clockwise)."""
    n = raster.width
    cu, cv = ego_pixel(n)
    c, s = math.cos(angle), math.sin(angle)
    # output pixel -> input pixel; v points down so the visual rotation flips sign
    h = Homography([[c, -s, cu - c * cu + s * cv],
                    [s, c, cv - s * cu - c * cv],
                    [0.0, 0.0, 1.0]])
    out, _ = resample_nearest(raster.classes, h, raster.classes.shape)
    return SemanticRaster(out, raster.resolution)


def query_tokens(raster: SemanticRaster, cfg: LocalizerConfig = LocalizerConfig()) -> np.ndarray:
    """(R, T, D) token arrays, one per query rotation."""
    views = [raster] + [rotate_about_ego(raster, 2 * math.pi * k / cfg.rotations)
                        for k in range(1, cfg.rotations)]
    return np.stack([tokenize(v, cfg.token_px, cfg.proj_seed, cfg.dim).flat() for v in views])


def coarse_logits(raster: SemanticRaster, base: np.ndarray, params: RetrievalParams,
                  cfg: LocalizerConfig = LocalizerConfig()) -> np.ndarray:
    q = query_tokens(raster, cfg)
    z, _ = forward(q, np.broadcast_to(base, (q.shape[0],) + base.shape), params)
    return z.max(axis=0)


def localize(obs: Observation | SemanticRaster, map_raster: SemanticRaster, params: RetrievalParams,
             spec: MapSpec = MapSpec(), cfg: LocalizerConfig = LocalizerConfig(),
             rng_seed: int = 0, coarse: GridIndex | None = None,
             base: np.ndarray | None = None) -> Localization:
    """Retrieve the best cell, then align inside its 3x3 patch.

    ``coarse`` bypasses retrieval (oracle or externally supplied cell).
    """
    raster = obs.raster if isinstance(obs, Observation) else obs
    if base is None:
        base = base_grid_for(map_raster, spec, cfg.token_px, cfg.proj_seed, cfg.dim).flat()
    logits = coarse_logits(raster, base, params, cfg)
    cell = coarse if coarse is not None else top_cells(logits, 1, spec.grid_dim)[0]
    fine = localize_fine(raster, map_raster, cell, spec, cfg.ransac, rng_seed)
    return Localization(cell, logits, fine)
