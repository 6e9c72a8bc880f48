"""``mapreloc`` command line: worldgen, dataset, train, localize, eval.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 internal error. ``--json-errors`` prints ``{"error", "message", "exit_code"}``
on stderr instead of plain text.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import __version__
from .errors import ConfigError, FormatError, MapRelocError, UndefinedMetricError
from .geom import GridIndex, MapSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("mapreloc")

_NUM = {"type": "number"}
_INT = {"type": "integer"}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    **_obj({
        "map_spec": _obj({"extent_m": _NUM, "resolution": _NUM, "grid_dim": _INT, "window_m": _NUM}),
        "worldgen": _obj({"seed": _INT, "road_graph_density": _NUM, "lane_width": _NUM,
                          "crosswalk_probability": _NUM, "carpark_count": _INT,
                          "divider_probability": _NUM, "heterogeneity": _NUM}),
        "contexts": _obj({"weights": {"type": "object", "additionalProperties": False,
                                      "properties": {"day": _NUM, "night": _NUM, "rain": _NUM,
                                                     "clean": _NUM}},
                          "target_iou": _NUM}),
        "dataset": _obj({"n": _INT, "frames": {"enum": [1, 2, 4, 8]}, "seed": _INT}),
        "train": _obj({"lr": _NUM, "epochs": _INT, "batch": _INT, "lambda": _NUM, "sigma_d": _NUM,
                       "seed": _INT, "views": _INT}),
        "ransac": _obj({"inlier_threshold": _NUM, "max_iterations": _INT, "confidence": _NUM,
                        "min_inliers": _INT}),
        "eval": _obj({"thresholds": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                     "minItems": 1},
                      "frames": {"enum": [1, 2, 4, 8]}, "rotations": _INT, "oracle": {"type": "boolean"},
                      "split": {"enum": ["train", "val", "all"]}, "seed": _INT}),
    }),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {where}: {exc.message}") from exc
    return doc


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _nonneg(v: str) -> int:
    n = int(v)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _cell(v: str) -> GridIndex:
    try:
        r, c = (int(x) for x in v.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {v!r}") from None
    return GridIndex(r, c)


def _weights(v: str) -> dict:
    out = {}
    for part in v.split(","):
        k, _, w = part.partition("=")
        try:
            out[k.strip()] = float(w)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected name=weight pairs, got {v!r}") from None
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _spec(cfg: dict) -> MapSpec:
    return MapSpec.from_dict({**MapSpec().to_dict(), **cfg.get("map_spec", {})})


def _load_maps_dir(directory) -> dict:
    from .storage import load_map
    d = _require(directory, "map directory")
    out = {}
    for png in sorted(d.glob("*.png")):
        if png.with_suffix(".json").exists():
            out[png.stem] = (png, *load_map(png))
    if not out:
        raise ConfigError(f"no map files in {d}")
    return out


# --------------------------------------------------------------------------- commands


def cmd_worldgen(args, cfg) -> int:
    from .storage import save_map
    from .worldgen import WorldGenConfig, generate_map
    spec = _spec(cfg)
    wg = dict(cfg.get("worldgen", {}))
    seed = _pick(args.seed, wg, "seed", 0)
    wg.pop("seed", None)
    if args.heterogeneity is not None:
        wg["heterogeneity"] = args.heterogeneity
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        wcfg = WorldGenConfig(seed=seed + k, **wg)
        raster = generate_map(wcfg, spec)
        save_map(out / f"map_{seed + k:06d}.png", raster, seed + k, spec,
                 {"worldgen": wcfg.to_dict()})
        log.info("wrote map seed %d", seed + k)
    return EXIT_OK


def cmd_dataset(args, cfg) -> int:
    from .eval import DEFAULT_CONTEXT_WEIGHTS, TRAIN_FRACTION, build_dataset, save_dataset, tier_profiles
    spec = _spec(cfg)
    ds, cx = cfg.get("dataset", {}), cfg.get("contexts", {})
    n = _pick(args.n, ds, "n", 100)
    frames = _pick(args.frames, ds, "frames", 1)
    seed = _pick(args.seed, ds, "seed", 0)
    weights = _pick(args.contexts, cx, "weights", DEFAULT_CONTEXT_WEIGHTS)
    target = _pick(args.target_iou, cx, "target_iou", 1.0)
    if n < 1:
        raise ConfigError("dataset n must be >= 1")
    loaded = _load_maps_dir(args.maps)
    maps = {}
    for k, (_, raster, meta) in loaded.items():
        if MapSpec.from_dict(meta["spec"]) != spec:
            raise ConfigError(f"map {k} was generated with a different map_spec")
        maps[k] = raster
    profiles = tier_profiles(target, maps, [c for c in sorted(weights) if weights[c] > 0], spec)
    samples = build_dataset(maps, n, weights, frames, seed, profiles, spec, render=not args.poses_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"spec": spec.to_dict(), "n": n, "frames": frames, "seed": seed, "contexts": weights,
            "target_iou": target, "train_fraction": TRAIN_FRACTION,
            "profiles": {k: v.to_dict() for k, v in sorted(profiles.items())},
            "maps": {k: {"path": os.path.relpath(p.resolve(), out.resolve()), "digest": r.digest()}
                     for k, (p, r, _) in sorted(loaded.items())}}
    save_dataset(out, samples, meta)
    return EXIT_OK


def _dataset_maps(directory, doc) -> dict:
    from .storage import load_map
    maps = {}
    for k, entry in doc["maps"].items():
        p = Path(directory) / entry["path"]
        raster, _ = load_map(_require(p, f"map {k}"))
        if raster.digest() != entry["digest"]:
            raise FormatError(f"map {k} digest", entry["digest"], raster.digest())
        maps[k] = raster
    return maps


def cmd_train(args, cfg) -> int:
    from .eval import load_dataset, training_material
    from .retrieval import TrainConfig, train, write_curve
    from .storage import save_params
    samples, doc = load_dataset(_require(args.dataset, "dataset"))
    spec = MapSpec.from_dict(doc["spec"])
    maps = _dataset_maps(args.dataset, doc)
    tr = cfg.get("train", {})
    tcfg = TrainConfig(lr=_pick(args.lr, tr, "lr", 1e-2), epochs=_pick(args.epochs, tr, "epochs", 60),
                       batch=_pick(args.batch, tr, "batch", 32), lam=_pick(args.lam, tr, "lambda", 1.0),
                       sigma_d=_pick(args.sigma_d, tr, "sigma_d", 50.0), seed=_pick(args.seed, tr, "seed", 0))
    views = _pick(args.views, tr, "views", 4)
    train_s = [s for s in samples if s.split == "train"]
    val_s = [s for s in samples if s.split == "val"]
    if not train_s:
        raise UndefinedMetricError("dataset has no training samples")
    ts, val = training_material(train_s, maps, val_s, views, tcfg.seed, spec)
    res = train(ts, tcfg, spec, val=val)
    hyper = {**tcfg.to_dict(), "views": views, "best_epoch": res.best_epoch}
    save_params(args.out, res.params, hyper)
    if args.curve:
        write_curve(args.curve, res.curve)
    return EXIT_OK


def _ransac(cfg: dict):
    from .finealign import RansacConfig
    return RansacConfig(**cfg.get("ransac", {}))


def cmd_localize(args, cfg) -> int:
    from .pipeline import LocalizerConfig, localize
    from .storage import load_map, load_observation, load_params, load_sequence
    from .temporal import fuse_frames
    sp = _require(args.sample, "sample")
    if sp.is_dir():
        seq = load_sequence(sp)
        obs = fuse_frames(seq.tail(args.frames) if args.frames else seq)
    else:
        obs = load_observation(sp)
    raster, meta = load_map(_require(args.map, "map"))
    spec = MapSpec.from_dict(meta["spec"])
    params, _ = load_params(_require(args.params, "params"))
    ev = cfg.get("eval", {})
    lcfg = LocalizerConfig(rotations=_pick(args.rotations, ev, "rotations", 1), ransac=_ransac(cfg))
    loc = localize(obs, raster, params, spec, lcfg, args.seed, coarse=args.cell)
    out = {"pose": loc.pose.as_list(), "coarse_cell": list(loc.coarse),
           "diagnostics": loc.fine.diagnostics(obs.truth_pose)}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .eval import EvalConfig, default_workers, load_dataset, run_experiment
    from .storage import load_params
    samples, doc = load_dataset(_require(args.dataset, "dataset"))
    params, blob = load_params(_require(args.params, "params"))
    spec = MapSpec.from_dict(doc["spec"])
    ev = cfg.get("eval", {})
    split = _pick(args.split, ev, "split", "val")
    chosen = [s for s in samples if split == "all" or s.split == split]
    if not chosen:
        raise UndefinedMetricError(f"no samples in split {split!r}")
    maps = _dataset_maps(args.dataset, doc)
    ecfg = EvalConfig(frames=_pick(args.frames, ev, "frames", None),
                      rotations=_pick(args.rotations, ev, "rotations", 1),
                      coarse_oracle=bool(_pick(args.oracle, ev, "oracle", False)),
                      seed=_pick(args.seed, ev, "seed", 0),
                      thresholds=tuple(ev.get("thresholds", (1.0, 2.0, 5.0, 10.0))),
                      ransac=_ransac(cfg))
    workers = args.workers if args.workers is not None else default_workers()
    meta = {"dataset_seed": doc.get("seed"), "target_iou": doc.get("target_iou"), "split": split,
            "params_hyper": blob.get("hyper", {})}
    report = run_experiment(chosen, maps, params, args.out, ecfg, spec, workers, meta)
    o = report["overall"]
    print(json.dumps({"n": report["n_samples"], "top_1x1": o["top_1x1"], "top_3x3": o["top_3x3"],
                      "recall@1m": o["recall"].get("1"), "median_error_m": o["median_error_m"]},
                     sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def _version_text() -> str:
    from .eval import DATASET_FORMAT, REPORT_SCHEMA
    from .storage import FORMAT_VERSIONS
    fmts = dict(FORMAT_VERSIONS, dataset=DATASET_FORMAT, report=REPORT_SCHEMA)
    return f"mapreloc {__version__} (" + ", ".join(f"{k} {v}" for k, v in sorted(fmts.items())) + ")"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mapreloc", description="GNSS-free map-matching localisation benchmark")
    p.add_argument("--version", action="store_true", help="print version and format versions")
    p.add_argument("--json-errors", action="store_true", help="machine-readable errors on stderr")
    p.add_argument("--workers", type=_positive, default=None, help="parallel evaluation processes")
    p.add_argument("--config", help="RunConfig JSON; command flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    w = sub.add_parser("worldgen", help="generate base maps")
    w.add_argument("--seed", type=int)
    w.add_argument("--count", type=_positive, default=1)
    w.add_argument("--heterogeneity", type=float)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_worldgen)

    d = sub.add_parser("dataset", help="sample drives and observations on maps")
    d.add_argument("--maps", required=True, help="directory of map PNG + JSON pairs")
    d.add_argument("--n", type=int)
    d.add_argument("--frames", type=int, choices=(1, 2, 4, 8))
    d.add_argument("--seed", type=int)
    d.add_argument("--contexts", type=_weights, help="e.g. day=0.7,night=0.15,rain=0.15")
    d.add_argument("--target-iou", type=float, help="degradation tier, 1.0 = clean")
    d.add_argument("--poses-only", action="store_true", help="skip rendering frames")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train the coarse retrieval head")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="BMMP parameter file")
    t.add_argument("--curve", help="learning-curve CSV")
    t.add_argument("--epochs", type=_nonneg)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=_positive)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--sigma-d", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--views", type=_positive)
    t.set_defaults(func=cmd_train)

    lo = sub.add_parser("localize", help="localise one sample, print a JSON pose")
    lo.add_argument("--sample", required=True, help="frame directory or observation PNG")
    lo.add_argument("--map", required=True)
    lo.add_argument("--params", required=True)
    lo.add_argument("--frames", type=int, choices=(1, 2, 4, 8))
    lo.add_argument("--cell", type=_cell, help="skip retrieval and align in ROW,COL")
    lo.add_argument("--rotations", type=_positive)
    lo.add_argument("--seed", type=int, default=0)
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("eval", help="evaluate a dataset split, write report, CSV and plots")
    e.add_argument("--dataset", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "all"))
    e.add_argument("--frames", type=int, choices=(1, 2, 4, 8))
    e.add_argument("--rotations", type=_positive)
    e.add_argument("--oracle", action="store_true", default=None, help="use the true coarse cell")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def _fail(json_errors: bool, code: int, exc: BaseException) -> int:
    if json_errors:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code},
                         sort_keys=True), file=sys.stderr)
    else:
        print(f"mapreloc: error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        if not json_errors:
            parser.print_usage(sys.stderr)
        return _fail(json_errors, EXIT_USAGE, exc)
    if args.version:
        print(_version_text())
        return EXIT_OK
    if args.command is None:
        return _fail(json_errors, EXIT_USAGE, UsageError("a command is required"))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config) if args.config else {}
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        return _fail(json_errors, EXIT_USAGE, exc)
    except (MapRelocError, OSError, ValueError) as exc:
        return _fail(json_errors, EXIT_DATA, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("internal error", exc_info=True)
        return _fail(json_errors, EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
