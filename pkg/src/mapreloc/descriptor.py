"""Token descriptors for semantic rasters and the pooled base grid.

A fixed, hand-built extractor: every ``token_px`` square becomes a 19-d raw
feature (class histogram, signed boundary-orientation histogram, quadrant
majority classes) that is pushed through a seeded Gaussian projection and
L2-normalised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TilingError
from .geom import MapSpec
from .raster import N_CLASSES, SemanticRaster

N_ORIENT = 8
N_QUAD = 4
RAW_DIM = N_CLASSES + N_ORIENT + N_QUAD
DEFAULT_DIM = 64
DEFAULT_TOKEN_PX = 20


@dataclass(frozen=True, eq=False)
class TokenGrid:
    data: np.ndarray  # (rows, cols, dim)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)


@dataclass(frozen=True, eq=False)
class BaseGrid:
    data: np.ndarray  # (G, G, dim)
    proj_seed: int = 0
    map_hash: str = ""

    @property
    def grid_dim(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)


def projection_matrix(proj_seed: int, dim: int = DEFAULT_DIM) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([proj_seed, dim, RAW_DIM]))
    return rng.standard_normal((RAW_DIM, dim)) / math.sqrt(dim)


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def raw_features(raster: SemanticRaster | np.ndarray, token_px: int = DEFAULT_TOKEN_PX) -> np.ndarray:
    """Per-token raw feature blocks, shape (rows, cols, 19)."""
    cls = raster.classes if isinstance(raster, SemanticRaster) else np.asarray(raster)
    h, w = cls.shape
    if token_px < 2 or h % token_px or w % token_px:
        raise TilingError(f"raster {h}x{w} is not tiled by {token_px} px tokens")
    rows, cols, t = h // token_px, w // token_px, token_px
    area = float(t * t)

    onehot = (cls[None] == np.arange(N_CLASSES, dtype=np.uint8)[:, None, None]).astype(np.float32)
    tiles = onehot.reshape(N_CLASSES, rows, t, cols, t)
    hist = tiles.sum(axis=(2, 4)).transpose(1, 2, 0) / area

    # signed gradient directions of foreground indicators, 45 degree bins centred on multiples of 45
    orient = np.zeros((rows * cols * N_ORIENT,), np.float64)
    tile_id = (np.arange(h)[:, None] // t) * cols + (np.arange(w)[None, :] // t)
    for c in range(1, N_CLASSES):
        if not tiles[c].any():
            continue
        gy, gx = np.gradient(onehot[c])
        mag = np.hypot(gx, gy)
        nz = mag > 0
        if not nz.any():
            continue
        ang = np.arctan2(gy[nz], gx[nz])
        b = np.rint(ang / (np.pi / 4)).astype(np.int64) % N_ORIENT
        orient += np.bincount(tile_id[nz] * N_ORIENT + b, weights=mag[nz],
                              minlength=orient.size)
    orient = orient.reshape(rows, cols, N_ORIENT) / area * 4.0

    q = t // 2
    quads = []
    for rs in (slice(0, q), slice(q, t)):
        for cs in (slice(0, q), slice(q, t)):
            counts = tiles[:, :, rs, :, cs].sum(axis=(2, 4))
            quads.append(np.argmax(counts, axis=0) / (N_CLASSES - 1))
    quads = np.stack(quads, axis=-1)
    return np.concatenate([hist, orient, quads], axis=-1)


def tokenize(raster: SemanticRaster, token_px: int = DEFAULT_TOKEN_PX, proj_seed: int = 0,
             dim: int = DEFAULT_DIM) -> TokenGrid:
    raw = raw_features(raster, token_px)
    return TokenGrid(_normalize(raw @ projection_matrix(proj_seed, dim)))


def pool_cells(cell_means: np.ndarray) -> np.ndarray:
    """Average every cell with its existing 3x3 neighbours (no padding)."""
    g0, g1 = cell_means.shape[:2]
    total = np.zeros_like(cell_means, dtype=np.float64)
    count = np.zeros((g0, g1, 1))
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            r0, r1 = max(0, -di), g0 - max(0, di)
            c0, c1 = max(0, -dj), g1 - max(0, dj)
            total[r0:r1, c0:c1] += cell_means[r0 + di:r1 + di, c0 + dj:c1 + dj]
            count[r0:r1, c0:c1] += 1
    return total / count


def pool_base_grid(map_tokens: TokenGrid, spec: MapSpec = MapSpec(), proj_seed: int = 0,
                   map_hash: str = "") -> BaseGrid:
    g = spec.grid_dim
    if map_tokens.rows % g or map_tokens.cols % g:
        raise ShapeError(f"{map_tokens.rows}x{map_tokens.cols} tokens do not tile a {g}x{g} grid")
    kr, kc = map_tokens.rows // g, map_tokens.cols // g
    cell_means = map_tokens.data.reshape(g, kr, g, kc, -1).mean(axis=(1, 3))
    return BaseGrid(_normalize(pool_cells(cell_means)), proj_seed, map_hash)


_CACHE: dict = {}
_CACHE_MAX = 32


def base_grid_for(map_raster: SemanticRaster, spec: MapSpec = MapSpec(),
                  token_px: int = DEFAULT_TOKEN_PX, proj_seed: int = 0,
                  dim: int = DEFAULT_DIM) -> BaseGrid:
    """Tokenise and pool a map once, memoised by the raster's content hash."""
    key = (map_raster.digest(), spec, token_px, proj_seed, dim)
    hit = _CACHE.get(key)
    if hit is None:
        tokens = tokenize(map_raster, token_px, proj_seed, dim)
        hit = pool_base_grid(tokens, spec, proj_seed, key[0])
        if len(_CACHE) >= _CACHE_MAX:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = hit
    return hit
