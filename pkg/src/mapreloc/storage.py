"""On-disk formats: paletted rasters with JSON sidecars, base-grid and parameter blobs.

Binary layouts (all little-endian)::

    BMMG  magic[4] version:u32 G:u32 D:u32 proj_seed:u64 map_hash:64 ascii bytes
          then G*G*D float32, row-major
    BMMP  magic[4] version:u32 blob_len:u32 blob (UTF-8 JSON hyper-parameters)
          then every tensor of PARAM_ORDER as float32, C order
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptor import BaseGrid
from .errors import FormatError
from .geom import MapSpec, Pose2
from .raster import CLASS_NAMES, PALETTE, SemanticRaster
from .retrieval import PARAM_ORDER, RetrievalParams
from .sensorsim import Observation
from .temporal import FrameSequence

MAP_FORMAT = "bmm-map/1"
OBS_FORMAT = "bmm-obs/1"
SEQ_FORMAT = "bmm-seq/1"
GRID_MAGIC = b"BMMG"
GRID_VERSION = 1
PARAM_MAGIC = b"BMMP"
PARAM_VERSION = 1
FORMAT_VERSIONS = {"map": MAP_FORMAT, "observation": OBS_FORMAT, "sequence": SEQ_FORMAT,
                   "base_grid": f"BMMG/{GRID_VERSION}", "params": f"BMMP/{PARAM_VERSION}"}


def dump_json(obj, path) -> None:
    """Stable JSON: sorted keys, fixed indent, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _flat_palette() -> list[int]:
    pal = [v for rgb in PALETTE for v in rgb]
    return pal + [0] * (768 - len(pal))


def write_png(path, raster: SemanticRaster) -> None:
    img = Image.fromarray(raster.classes, mode="P")
    img.putpalette(_flat_palette())
    img.save(path, format="PNG", optimize=False)


def read_png(path, resolution: float) -> SemanticRaster:
    with Image.open(path) as img:
        if img.mode != "P":
            raise FormatError(f"{path}", "paletted PNG", img.mode)
        return SemanticRaster(np.asarray(img, dtype=np.uint8), resolution)


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def _check_format(meta: dict, expected: str, path) -> None:
    found = meta.get("format")
    if found != expected:
        raise FormatError(f"{path}", expected, found)


def save_map(path, raster: SemanticRaster, seed: int, spec: MapSpec, extra: dict | None = None) -> None:
    write_png(path, raster)
    meta = {"format": MAP_FORMAT, "seed": seed, "spec": spec.to_dict(),
            "palette": [list(c) for c in PALETTE], "classes": list(CLASS_NAMES),
            "digest": raster.digest()}
    if extra:
        meta.update(extra)
    dump_json(meta, _sidecar(path))


def load_map(path) -> tuple[SemanticRaster, dict]:
    meta = json.loads(_sidecar(path).read_text())
    _check_format(meta, MAP_FORMAT, _sidecar(path))
    spec = MapSpec.from_dict(meta["spec"])
    raster = read_png(path, spec.resolution)
    if raster.width != spec.size_px or raster.height != spec.size_px:
        raise FormatError(f"{path}", f"{spec.size_px}x{spec.size_px} px", f"{raster.width}x{raster.height} px")
    return raster, meta


def save_observation(path, obs: Observation, seed: int | None = None,
                     include_truth: bool = True) -> None:
    write_png(path, obs.raster)
    meta = {"format": OBS_FORMAT, "context": obs.context, "resolution": obs.raster.resolution,
            "seed": seed, "truncated": obs.truncated}
    if include_truth and obs.truth_pose is not None:
        meta["truth_pose"] = obs.truth_pose.as_list()
    dump_json(meta, _sidecar(path))


def load_observation(path) -> Observation:
    meta = json.loads(_sidecar(path).read_text())
    _check_format(meta, OBS_FORMAT, _sidecar(path))
    raster = read_png(path, float(meta["resolution"]))
    truth = Pose2(*meta["truth_pose"]) if meta.get("truth_pose") else None
    return Observation(raster, meta["context"], truth, bool(meta.get("truncated", False)),
                       {"seed": meta.get("seed")})


def save_sequence(directory, seq: FrameSequence, include_truth: bool = True) -> None:
    """A frame sequence as ``frame_XX.png`` (+ sidecars) and ``odometry.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(seq.frames):
        save_observation(d / f"frame_{k:02d}.png", frame, frame.meta.get("seed"), include_truth)
    meta = {"format": SEQ_FORMAT, "frames": len(seq.frames), "dt": seq.dt,
            "rel_odometry": [p.as_list() for p in seq.rel_odometry]}
    dump_json(meta, d / "odometry.json")


def load_sequence(directory) -> FrameSequence:
    d = Path(directory)
    meta = json.loads((d / "odometry.json").read_text())
    _check_format(meta, SEQ_FORMAT, d / "odometry.json")
    frames = tuple(load_observation(d / f"frame_{k:02d}.png") for k in range(meta["frames"]))
    odo = tuple(Pose2(*p) for p in meta["rel_odometry"])
    return FrameSequence(frames, odo, float(meta["dt"]))


def save_base_grid(path, grid: BaseGrid) -> None:
    g, d = grid.grid_dim, grid.dim
    digest = grid.map_hash.encode("ascii").ljust(64, b"\0")[:64]
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IIIQ", GRID_VERSION, g, d, grid.proj_seed & (2 ** 64 - 1)))
        fh.write(digest)
        fh.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def load_base_grid(path) -> BaseGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC:
        raise FormatError(f"{path}", GRID_MAGIC.decode(), raw[:4].decode("latin-1"))
    version, g, d, seed = struct.unpack_from("<IIIQ", raw, 4)
    if version != GRID_VERSION:
        raise FormatError(f"{path} version", GRID_VERSION, version)
    off = 4 + struct.calcsize("<IIIQ")
    digest = raw[off:off + 64].rstrip(b"\0").decode("ascii")
    off += 64
    body = raw[off:]
    if len(body) != g * g * d * 4:
        raise FormatError(f"{path} payload bytes", g * g * d * 4, len(body))
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(g, g, d)
    return BaseGrid(data, int(seed), digest)


def save_params(path, params: RetrievalParams, hyper: dict | None = None) -> None:
    tensors = params.tensors()
    blob = {"heads": params.heads, "dim": params.dim, "n_tokens": params.n_tokens,
            "n_cells": params.n_cells, "hyper": hyper or {},
            "shapes": {k: list(v.shape) for k, v in tensors.items()}}
    data = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(data)))
        fh.write(data)
        for k in PARAM_ORDER:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_params(path) -> tuple[RetrievalParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise FormatError(f"{path}", PARAM_MAGIC.decode(), raw[:4].decode("latin-1"))
    version, n = struct.unpack_from("<II", raw, 4)
    if version != PARAM_VERSION:
        raise FormatError(f"{path} version", PARAM_VERSION, version)
    blob = json.loads(raw[12:12 + n].decode("utf-8"))
    off = 12 + n
    tensors = {}
    for k in PARAM_ORDER:
        shape = tuple(blob["shapes"][k])
        size = int(np.prod(shape)) * 4
        if off + size > len(raw):
            raise FormatError(f"{path} tensor {k}", f"{size} bytes", f"{len(raw) - off} bytes")
        tensors[k] = np.frombuffer(raw[off:off + size], dtype="<f4").astype(np.float64).reshape(shape)
        off += size
    if off != len(raw):
        raise FormatError(f"{path} length", off, len(raw))
    return RetrievalParams(**tensors, heads=int(blob["heads"])), blob

