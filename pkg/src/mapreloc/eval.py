"""Benchmark harness: datasets, metrics, experiment runs and reports.

A sample is a short drive ending at a uniformly spawned pose; its newest
frame carries the truth pose. Samples are split into train/val by a hash of
their id so the split is stable however the dataset is sliced.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .descriptor import base_grid_for, tokenize
from .errors import ConfigError, UndefinedMetricError
from .finealign import RansacConfig
from .geom import GridIndex, MapSpec, Pose2, world_to_cell
from .pipeline import LocalizerConfig, localize
from .raster import SemanticRaster
from .retrieval import RetrievalParams, TrainSet
from .sensorsim import PRESETS, ContextProfile, calibrate_profile, render_observation
from .temporal import FrameSequence, fuse_frames, simulate_trajectory
from .worldgen import sample_spawn_pose, spawn_margin

log = logging.getLogger(__name__)

REPORT_SCHEMA = "bmm-report/1"
DATASET_FORMAT = "bmm-dataset/1"
SEARCH_SCALE = 200.0 / 30.0
TRAIN_FRACTION = 28130 / (28130 + 6019)
DEFAULT_CONTEXT_WEIGHTS = {"day": 0.7, "night": 0.15, "rain": 0.15}
DEFAULT_THRESHOLDS = (1.0, 2.0, 5.0, 10.0)
HIST_BIN_M = 0.25
HIST_MAX_M = 10.0
DISPLACEMENT_BINS = 4
CSV_COLUMNS = ("sample_id", "map_id", "context", "truth_row", "truth_col", "coarse_row",
               "coarse_col", "hit_1x1", "hit_3x3", "est_x", "est_y", "est_theta", "truth_x",
               "truth_y", "truth_theta", "position_error", "fallback", "inliers", "rms_px",
               "displacement_m")


# --------------------------------------------------------------------------- dataset


def split_of(sample_id: str, train_fraction: float = TRAIN_FRACTION) -> str:
    h = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "big")
    return "train" if h / 2.0 ** 64 < train_fraction else "val"


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    index: int
    map_id: str
    context: str
    truth_pose: Pose2
    truth_cell: GridIndex
    split: str
    seq: FrameSequence | None = field(default=None, repr=False)
    path: str | None = field(default=None, repr=False)

    def sequence(self) -> FrameSequence:
        if self.seq is not None:
            return self.seq
        if self.path is None:
            raise ConfigError(f"sample {self.id} has neither frames nor a frame directory")
        from .storage import load_sequence
        return load_sequence(self.path)

    def manifest(self) -> dict:
        return {"id": self.id, "index": self.index, "map_id": self.map_id, "context": self.context,
                "truth_pose": self.truth_pose.as_list(), "truth_cell": list(self.truth_cell),
                "split": self.split}


def _pick_context(weights: Mapping[str, float], u: float) -> str:
    names = sorted(weights)
    w = np.array([weights[k] for k in names], float)
    if (w < 0).any() or w.sum() <= 0:
        raise ConfigError("context weights must be non-negative and not all zero")
    cdf = np.cumsum(w) / w.sum()
    return names[min(int(np.searchsorted(cdf, u, side="right")), len(names) - 1)]


def build_dataset(maps: Mapping[str, SemanticRaster], n: int,
                  contexts: Mapping[str, float] = DEFAULT_CONTEXT_WEIGHTS, frame_count: int = 1,
                  seed: int = 0, profiles: Mapping[str, ContextProfile] | None = None,
                  spec: MapSpec = MapSpec(), render: bool = True) -> list[Sample]:
    """Deterministic samples cycling over the maps in sorted-id order.

    Context, spawn, trajectory and degradation streams are drawn per sample
    from ``(seed, index)``, so changing only ``profiles`` keeps poses, contexts
    and noise seeds fixed. With ``render=False`` only poses are produced.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not maps:
        raise ConfigError("no maps given")
    profiles = dict(profiles or {})
    ids = sorted(maps)
    out = []
    for i in range(n):
        spawn_ss, ctx_ss, traj_ss = np.random.SeedSequence([seed, i]).spawn(3)
        map_id = ids[i % len(ids)]
        m = maps[map_id]
        ctx = _pick_context(contexts, float(np.random.default_rng(ctx_ss).random()))
        pose = sample_spawn_pose(m, int(spawn_ss.generate_state(1)[0]), spec.window_m)
        seq = None
        if render or frame_count > 1:
            seq = simulate_trajectory(m, pose, frame_count, rng_seed=int(traj_ss.generate_state(1)[0]),
                                      spec=spec, profile=profiles.get(ctx), anchor="last")
            frames = tuple(replace(f, context=ctx) for f in seq.frames)
            seq = replace(seq, frames=frames)
            pose = seq.truth_poses[-1]
            if not render:
                seq = None
        sid = f"{i:06d}"
        out.append(Sample(sid, i, map_id, ctx, pose, world_to_cell(pose.x, pose.y, spec),
                          split_of(sid), seq))
    return out


def tier_profiles(target_iou: float, maps: Mapping[str, SemanticRaster],
                  contexts: Sequence[str] = tuple(DEFAULT_CONTEXT_WEIGHTS),
                  spec: MapSpec = MapSpec(), seeds: int = 200, seed: int = 7) -> dict[str, ContextProfile]:
    """Flip rates per context fitted so each context alone reaches ``target_iou``."""
    if target_iou >= 1.0:
        return {c: replace(PRESETS[c], flip_rate=0.0, boundary_jitter=0.0, dropout_blob_rate=0.0,
                           dropout_blob_radius=0.0, target_iou=1.0) for c in contexts}
    ids = sorted(maps)
    obs = []
    for k in range(seeds):
        m = maps[ids[k % len(ids)]]
        obs.append(render_observation(m, sample_spawn_pose(m, 0xCA1B + seed * 100003 + k, spec.window_m), spec))
    return {c: calibrate_profile(target_iou, spec, seeds, c, obs, seed_base=seed * 1000003)
            for c in contexts}


def save_dataset(directory, samples: Sequence[Sample], meta: dict) -> None:
    from .storage import dump_json, save_sequence
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.seq is not None:
            save_sequence(d / "samples" / s.id, s.seq)
    doc = dict(meta, format=DATASET_FORMAT, samples=[s.manifest() for s in samples])
    dump_json(doc, d / "dataset.json")


def load_dataset(directory) -> tuple[list[Sample], dict]:
    from .errors import FormatError
    d = Path(directory)
    doc = json.loads((d / "dataset.json").read_text())
    if doc.get("format") != DATASET_FORMAT:
        raise FormatError(str(d / "dataset.json"), DATASET_FORMAT, doc.get("format"))
    samples = []
    for r in doc["samples"]:
        p = d / "samples" / r["id"]
        samples.append(Sample(r["id"], int(r["index"]), r["map_id"], r["context"],
                              Pose2(*r["truth_pose"]), GridIndex(*r["truth_cell"]), r["split"],
                              None, str(p) if p.is_dir() else None))
    return samples, doc


def training_material(samples: Sequence[Sample], maps: Mapping[str, SemanticRaster],
                      val_samples: Sequence[Sample] = (), views: int = 4, seed: int = 0,
                      spec: MapSpec = MapSpec(), cfg: LocalizerConfig = LocalizerConfig()):
    """Clean token views for training plus a single-view held-out set.

    Each training sample gets its true heading and ``views - 1`` random ones.
    """
    if views < 1:
        raise ValueError("views must be >= 1")

    def tok(m, pose):
        obs = render_observation(m, pose, spec)
        return tokenize(obs.raster, cfg.token_px, cfg.proj_seed, cfg.dim).flat()

    ids = sorted({s.map_id for s in samples} | {s.map_id for s in val_samples})
    bases = {k: base_grid_for(maps[k], spec, cfg.token_px, cfg.proj_seed, cfg.dim).flat() for k in ids}
    tr_views = []
    for s in samples:
        rng = np.random.default_rng(np.random.SeedSequence([seed, s.index, 0x56]))
        p = s.truth_pose
        thetas = [p.theta] + list(rng.uniform(-math.pi, math.pi, views - 1))
        tr_views.append(np.stack([tok(maps[s.map_id], Pose2(p.x, p.y, t)) for t in thetas]))
    train_set = TrainSet(tr_views, [s.map_id for s in samples], [s.truth_cell for s in samples], bases)
    val = None
    if val_samples:
        val = ([tok(maps[s.map_id], s.truth_pose)[None] for s in val_samples],
               [s.map_id for s in val_samples], [s.truth_cell for s in val_samples])
    return train_set, val


# --------------------------------------------------------------------------- metrics


def _errors(errors) -> np.ndarray:
    e = np.asarray(list(errors), float)
    if e.size == 0:
        raise UndefinedMetricError("metric over an empty set")
    return e


def recall_at(errors, d: float) -> float:
    if d <= 0:
        raise ValueError("threshold must be positive")
    e = _errors(errors)
    return float(np.count_nonzero(e <= d)) / e.size


def scaled_recall(errors, d: float) -> float:
    """Recall at ``d`` scaled by the search-area ratio against a 30 m prior."""
    return recall_at(errors, d * SEARCH_SCALE)


def coarse_metrics(records) -> tuple[float, float]:
    recs = list(records)
    if not recs:
        raise UndefinedMetricError("coarse metrics over an empty set")
    return (sum(r.hit_1x1 for r in recs) / len(recs), sum(r.hit_3x3 for r in recs) / len(recs))


def error_histogram(errors, bin_m: float = HIST_BIN_M, max_m: float = HIST_MAX_M) -> dict:
    e = _errors(errors)
    nb = int(round(max_m / bin_m))
    idx = np.minimum(np.floor(e / bin_m).astype(np.int64), nb)
    counts = np.bincount(idx, minlength=nb + 1)
    return {"bin_m": bin_m, "max_m": max_m, "counts": counts[:nb].tolist(),
            "overflow": int(counts[nb])}


def bootstrap_ci(values, n_boot: int = 2000, alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the mean."""
    v = _errors(values)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, (n_boot, v.size))].mean(axis=1)
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))


def paired_bootstrap_gap(a, b, n_boot: int = 2000, alpha: float = 0.05, seed: int = 0) -> dict:
    """Mean of ``a - b`` over paired samples with its percentile interval."""
    a, b = _errors(a), _errors(b)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    lo, hi = bootstrap_ci(a - b, n_boot, alpha, seed)
    return {"gap": float((a - b).mean()), "lo": lo, "hi": hi}


def displacement_edges(spec: MapSpec = MapSpec(), bins: int = DISPLACEMENT_BINS) -> tuple[list[float], float]:
    """Bin edges of spawn distance from the map centre, and where the edge band starts.

    Beyond ``extent/2 - margin`` only the corners of the spawn square remain,
    which is the band hugging the map border.
    """
    inner = spec.extent_m / 2 - spawn_margin(spec.window_m)
    edges = [inner * k / bins for k in range(bins + 1)]
    return edges, inner


def displacement_curve(records, spec: MapSpec = MapSpec(), bins: int = DISPLACEMENT_BINS) -> dict:
    """Median error per displacement bin, fallbacks excluded."""
    edges, inner = displacement_edges(spec, bins)
    recs = [r for r in records if not r.fallback]
    meds, counts = [], []
    bounds = list(zip(edges[:-1], edges[1:])) + [(inner, math.inf)]
    for lo, hi in bounds:
        e = [r.position_error for r in recs if lo <= r.displacement_m < hi]
        counts.append(len(e))
        meds.append(float(np.median(e)) if e else None)
    inner_meds = [m for m in meds[:-1] if m is not None]
    ratio = (max(inner_meds) / min(inner_meds)) if inner_meds and min(inner_meds) > 0 else None
    return {"edges_m": edges + [None], "median_error": meds, "count": counts,
            "edge_band_start_m": inner, "nonedge_max_min_ratio": ratio}


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    map_id: str
    context: str
    truth_cell: GridIndex
    coarse_cell: GridIndex
    hit_1x1: bool
    hit_3x3: bool
    est_pose: Pose2
    truth_pose: Pose2
    position_error: float
    fallback: bool
    inliers: int
    rms_px: float
    displacement_m: float

    def row(self) -> list[str]:
        def f(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"
        return [self.sample_id, self.map_id, self.context, str(self.truth_cell.row),
                str(self.truth_cell.col), str(self.coarse_cell.row), str(self.coarse_cell.col),
                str(int(self.hit_1x1)), str(int(self.hit_3x3)), f(self.est_pose.x), f(self.est_pose.y),
                f(self.est_pose.theta), f(self.truth_pose.x), f(self.truth_pose.y),
                f(self.truth_pose.theta), f(self.position_error), str(int(self.fallback)),
                str(self.inliers), f(self.rms_px), f(self.displacement_m)]


@dataclass(frozen=True)
class EvalConfig:
    frames: int | None = None       # newest frames to fuse; None = all stored
    rotations: int = 1
    coarse_oracle: bool = False
    seed: int = 0
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def localizer(self) -> LocalizerConfig:
        return LocalizerConfig(rotations=self.rotations, ransac=self.ransac)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


def evaluate_sample(sample: Sample, map_raster: SemanticRaster, params: RetrievalParams,
                    cfg: EvalConfig = EvalConfig(), spec: MapSpec = MapSpec(),
                    base: np.ndarray | None = None) -> EvalRecord:
    seq = sample.sequence()
    if cfg.frames is not None:
        seq = seq.tail(cfg.frames)
    query = fuse_frames(seq)
    oracle = sample.truth_cell if cfg.coarse_oracle else None
    loc = localize(query, map_raster, params, spec, cfg.localizer(), cfg.seed ^ sample.index,
                   coarse=oracle, base=base)
    est, truth = loc.pose, sample.truth_pose
    fine = loc.fine
    c = spec.extent_m / 2
    return EvalRecord(sample.id, sample.map_id, sample.context, sample.truth_cell, loc.coarse,
                      loc.coarse == sample.truth_cell, loc.coarse.chebyshev(sample.truth_cell) <= 1,
                      est, truth, math.hypot(est.x - truth.x, est.y - truth.y), fine.fallback,
                      fine.inliers, fine.rms_px, math.hypot(truth.x - c, truth.y - c))


_STATE: dict = {}


def _work(chunk):
    s = _STATE
    return [evaluate_sample(x, s["maps"][x.map_id], s["params"], s["cfg"], s["spec"],
                            s["bases"][x.map_id]) for x in chunk]


def evaluate(samples: Sequence[Sample], maps: Mapping[str, SemanticRaster], params: RetrievalParams,
             cfg: EvalConfig = EvalConfig(), spec: MapSpec = MapSpec(),
             workers: int = 1) -> list[EvalRecord]:
    """Records sorted by sample id; identical for any worker count."""
    if not samples:
        raise UndefinedMetricError("no samples to evaluate")
    missing = sorted({s.map_id for s in samples} - set(maps))
    if missing:
        raise ConfigError(f"samples reference unknown maps {missing}")
    lcfg = cfg.localizer()
    bases = {k: base_grid_for(maps[k], spec, lcfg.token_px, lcfg.proj_seed, lcfg.dim).flat()
             for k in sorted({s.map_id for s in samples})}
    _STATE.update(maps=maps, params=params, cfg=cfg, spec=spec, bases=bases)
    ordered = sorted(samples, key=lambda s: s.id)
    try:
        if workers <= 1 or "fork" not in mp.get_all_start_methods():
            return _work(ordered)
        size = max(1, math.ceil(len(ordered) / (workers * 4)))
        chunks = [ordered[i:i + size] for i in range(0, len(ordered), size)]
        with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as ex:
            return [r for part in ex.map(_work, chunks) for r in part]
    finally:
        _STATE.clear()


def _block(records, thresholds) -> dict:
    errs = [r.position_error for r in records]
    top1, top3 = coarse_metrics(records)
    fin = [r.position_error for r in records if not r.fallback]
    return {
        "n": len(records),
        "top_1x1": top1,
        "top_3x3": top3,
        "recall": {f"{d:g}": recall_at(errs, d) for d in thresholds},
        "scaled_recall": {f"{d:g}": scaled_recall(errs, d) for d in thresholds},
        "median_error_m": float(np.median(errs)),
        "median_error_aligned_m": float(np.median(fin)) if fin else None,
        "fallback_rate": sum(r.fallback for r in records) / len(records),
        "error_histogram": error_histogram(errs),
    }


def summarize(records: Sequence[EvalRecord], thresholds=DEFAULT_THRESHOLDS,
              spec: MapSpec = MapSpec()) -> dict:
    if not records:
        raise UndefinedMetricError("no records to summarise")
    ctxs = sorted({r.context for r in records})
    return {
        "overall": _block(records, thresholds),
        "per_context": {c: _block([r for r in records if r.context == c], thresholds) for c in ctxs},
        "displacement_curve": displacement_curve(records, spec),
        "search_scale": SEARCH_SCALE,
    }


def write_records_csv(path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())


def run_experiment(samples: Sequence[Sample], maps: Mapping[str, SemanticRaster],
                   params: RetrievalParams, out_dir, cfg: EvalConfig = EvalConfig(),
                   spec: MapSpec = MapSpec(), workers: int = 1, meta: dict | None = None) -> dict:
    """Evaluate, then write ``report.json``, ``records.csv`` and three SVG plots."""
    from .plots import render_all
    from .storage import dump_json
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = evaluate(samples, maps, params, cfg, spec, workers)
    report = {"schema": REPORT_SCHEMA, "config": cfg.to_dict(), "meta": meta or {},
              "n_samples": len(records), **summarize(records, cfg.thresholds, spec)}
    write_records_csv(out / "records.csv", records)
    report["plots"] = render_all(report, out)
    dump_json(report, out / "report.json")
    return report


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
