"""Acceptance criteria, one PASS/FAIL line each.

Criteria 6 to 9 share one trained head (4 maps, 2000 samples) and one set of
600 four-frame drives rendered at three degradation tiers with identical
poses, contexts and noise seeds.
"""
import math
import time

import numpy as np
import pytest

from mapreloc.cli import main
from mapreloc.descriptor import pool_cells
from mapreloc.eval import (EvalConfig, build_dataset, default_workers, evaluate,
                           paired_bootstrap_gap, summarize, tier_profiles, training_material)
from mapreloc.finealign import dlt_homography
from mapreloc.geom import GridIndex
from mapreloc.raster import per_class_iou
from mapreloc.retrieval import RetrievalParams, TrainConfig, forward, loss, soft_target, train
from mapreloc.sensorsim import render_observation
from mapreloc.worldgen import sample_spawn_pose
from oracles import (brute_pool, gradient_check, inverse_map_render, naive_logits, project,
                     random_homography, ransac_trial)

TIERS = (1.0, 0.75, 0.627)
N_TREND = 600


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_criterion_1_loss_analytics(capsys):
    cell = GridIndex(5, 5)
    lv = loss(np.zeros(100), cell)
    bce_err = abs(lv.bce - math.log(2))
    dist_err = abs(loss(np.full(100, 0.3), cell).dist - math.log(100))
    sums = max(abs(soft_target(GridIndex(r, c)).sum() - 1.0) for r in range(10) for c in range(10))
    s = soft_target(cell, sigma_d=50.0)
    ratio_err = abs(s[55] / s[56] - math.exp(0.5))
    ok = bce_err <= 1e-9 and dist_err <= 1e-9 and sums <= 1e-12 and ratio_err <= 1e-9
    report(capsys, 1, ok, f"|BCE-ln2|={bce_err:.1e} |Dist-ln100|={dist_err:.1e} "
                          f"|sum-1|={sums:.1e} |ratio-e^0.5|={ratio_err:.1e}")


def test_criterion_2_gradient_check(capsys):
    t0 = time.perf_counter()
    errs = []
    for k in range(20):
        d = (16, 32, 64)[k % 3]
        tn = (16, 36, 100)[k % 3]
        errs.append(gradient_check(k, b=1 + k % 3, t=tn, n=tn, d=d, heads=8,
                                   lam=(0.0, 0.5, 1.0, 2.0)[k % 4]))
    dt = time.perf_counter() - t0
    report(capsys, 2, max(errs) < 1e-3 and dt < 60,
           f"max rel err {max(errs):.2e} over 20 configs, {dt:.1f} s")


def test_criterion_3_dlt_and_ransac(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dlt = 0.0
    for _ in range(100):
        h = random_homography(rng, jitter=0.2, perspective=1e-3)
        src = rng.uniform(-200, 200, (4, 2))
        est = dlt_homography(src, project(h, src))
        dlt = max(dlt, float(np.abs(project(est, src) - project(h, src)).max()))
    wins = sum(ransac_trial(s) for s in range(500))
    dt = time.perf_counter() - t0
    report(capsys, 3, dlt < 1e-6 and wins >= 495 and dt < 120,
           f"DLT max err {dlt:.1e} px, RANSAC {wins}/500 recovered, {dt:.1f} s")


def test_criterion_4_oracle_equivalence(capsys, maps, spec):
    att = 0.0
    for k in range(5):
        rng = np.random.default_rng(k)
        heads = (4, 8)[k % 2]
        p = RetrievalParams.init(12, 16, 16, heads, k)
        p.b_head = rng.normal(size=16)
        q, base = rng.normal(size=(12, 16)), rng.normal(size=(16, 16))
        z, _ = forward(q[None], base[None], p)
        att = max(att, float(np.abs(z[0] - naive_logits(q, base, p)).max()))
    m = np.random.default_rng(9).normal(size=(10, 10, 64))
    pool = float(np.abs(pool_cells(m) - brute_pool(m)).max())
    ious = []
    for k, mid in enumerate(sorted(maps)):
        pose = sample_spawn_pose(maps[mid], 900 + k)
        got = render_observation(maps[mid], pose, spec).raster.classes
        ious += per_class_iou(got, inverse_map_render(maps[mid].classes, pose)).values()
    ok = att < 1e-6 and pool < 1e-9 and min(ious) == 1.0
    report(capsys, 4, ok, f"attention {att:.1e}, pooling {pool:.1e}, renderer min IoU {min(ious)}")


def test_criterion_5_clean_end_to_end(capsys, maps, spec):
    t0 = time.perf_counter()
    samples = build_dataset(maps, 200, frame_count=1, seed=11)
    recs = evaluate(samples, maps, RetrievalParams.init(seed=0), EvalConfig(coarse_oracle=True),
                    spec, default_workers())
    o = summarize(recs)["overall"]
    dt = time.perf_counter() - t0
    ok = o["median_error_m"] < 0.5 and o["recall"]["1"] >= 0.95 and dt < 300
    report(capsys, 5, ok, f"median {o['median_error_m']:.3f} m, recall@1m {o['recall']['1']:.3f}, "
                          f"{dt:.0f} s")


@pytest.fixture(scope="module")
def trained(maps, spec):
    t0 = time.perf_counter()
    samples = build_dataset(maps, 2000, frame_count=1, seed=0, render=False)
    tr = [s for s in samples if s.split == "train"]
    va = [s for s in samples if s.split == "val"]
    ts, val = training_material(tr, maps, va, 4, 0, spec)
    res = train(ts, TrainConfig(), spec, val=val)
    return res, len(tr), len(va), time.perf_counter() - t0


@pytest.fixture(scope="module")
def trend(trained, maps, spec):
    params = trained[0].params
    out = {}
    for tier in TIERS:
        samples = build_dataset(maps, N_TREND, frame_count=4, seed=1,
                                profiles=tier_profiles(tier, maps, spec=spec))
        for frames in ((1, 4) if tier == 0.75 else (1,)):
            out[tier, frames] = evaluate(samples, maps, params, EvalConfig(frames=frames), spec,
                                         default_workers())
    return out


def test_criterion_6_coarse_retrieval(capsys, trained):
    res, n_tr, n_va, dt = trained
    top3 = res.curve[res.best_epoch - 1]["val_top3"]
    ok = top3 >= 0.85 and n_tr + n_va >= 2000 and dt < 900
    report(capsys, 6, ok, f"held-out Top-3x3 {top3:.3f} on {n_va} val / {n_tr} train, "
                          f"training {dt:.0f} s")


def test_criterion_7_temporal_fusion(capsys, trend):
    four = np.array([r.hit_1x1 for r in trend[0.75, 4]], float)
    one = np.array([r.hit_1x1 for r in trend[0.75, 1]], float)
    g = paired_bootstrap_gap(four, one)
    ok = four.mean() >= one.mean() and g["lo"] > 0 and len(four) >= 500
    report(capsys, 7, ok, f"IoU 0.75 Top-1x1 4 frames {four.mean():.3f} vs 1 frame {one.mean():.3f}, "
                          f"gap 95% CI [{g['lo']:.3f}, {g['hi']:.3f}], n={len(four)}")


def test_criterion_8_quality_ordering(capsys, trend):
    blocks = [summarize(trend[t, 1])["overall"] for t in TIERS]
    top1 = [b["top_1x1"] for b in blocks]
    r1 = [b["recall"]["1"] for b in blocks]
    ok = top1[0] >= top1[1] >= top1[2] and r1[0] >= r1[1] >= r1[2]
    report(capsys, 8, ok, "Top-1x1 " + " >= ".join(f"{v:.3f}" for v in top1)
           + "; recall@1m " + " >= ".join(f"{v:.3f}" for v in r1))


def test_criterion_9_displacement_robustness(capsys, trend):
    clean = summarize(trend[1.0, 1])["displacement_curve"]
    fused = summarize(trend[0.75, 4])["displacement_curve"]
    ratio = clean["nonedge_max_min_ratio"]
    meds = ", ".join(f"{m:.3f}" for m in clean["median_error"][:-1])
    report(capsys, 9, ratio is not None and ratio <= 1.5,
           f"clean non-edge medians [{meds}] m, max/min {ratio:.2f}; "
           f"IoU 0.75 four-frame max/min {fused['nonedge_max_min_ratio']:.2f}")


def cli(*argv):
    assert main([str(a) for a in argv]) == 0


def test_criterion_10_byte_identical_reruns(capsys, tmp_path):
    for run in ("a", "b"):
        d = tmp_path / run
        cli("worldgen", "--seed", 2, "--count", 2, "--out", d / "maps")
        cli("dataset", "--maps", d / "maps", "--n", 12, "--frames", 2, "--seed", 3,
            "--target-iou", 0.75, "--out", d / "ds")
        cli("train", "--dataset", d / "ds", "--out", d / "p.bmmp", "--curve", d / "curve.csv",
            "--epochs", 2, "--batch", 4, "--views", 2)
        cli("--workers", 1, "eval", "--dataset", d / "ds", "--params", d / "p.bmmp",
            "--out", d / "eval", "--split", "all")
        capsys.readouterr()
        cli("localize", "--sample", d / "ds" / "samples" / "000000", "--map",
            d / "maps" / "map_000002.png", "--params", d / "p.bmmp")
        (d / "localize.json").write_text(capsys.readouterr().out)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = files == other and not diff and len(files) > 20
    report(capsys, 10, ok, f"{len(files)} files compared, {len(diff)} differ"
                           + (f": {diff[:3]}" if diff else ""))
