"""Self-contained SVG figures for an evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

_RC = {"svg.hashsalt": "mapreloc", "svg.fonttype": "path", "font.size": 9}
FILES = {"error_density": "error_density.svg", "displacement": "median_error_vs_displacement.svg",
         "contexts": "per_context.svg"}


def _save(fig: Figure, path: Path) -> None:
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def error_density(report: dict, path: Path) -> None:
    h = report["overall"]["error_histogram"]
    counts = np.asarray(h["counts"], float)
    total = counts.sum() + h["overflow"]
    edges = np.arange(len(counts) + 1) * h["bin_m"]
    dens = counts / (total * h["bin_m"]) if total else counts
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.2))
        ax = fig.add_subplot()
        ax.bar(edges[:-1], dens, width=h["bin_m"], align="edge", color="#1f78b4", edgecolor="white",
               linewidth=0.3)
        ax.set_xlabel("position error (m)")
        ax.set_ylabel("density (1/m)")
        ax.set_xlim(0, h["max_m"])
        share = h["overflow"] / total if total else 0.0
        ax.set_title(f"error density ({share:.1%} beyond {h['max_m']:g} m)")
        fig.tight_layout()
        _save(fig, path)


def displacement(report: dict, path: Path) -> None:
    cur = report["displacement_curve"]
    edges = cur["edges_m"][:-1]
    inner = cur["edge_band_start_m"]
    mids = [(a + b) / 2 for a, b in zip(edges[:-1], edges[1:])]
    mids.append(inner + (edges[1] - edges[0]) / 2)
    pts = [(x, m) for x, m in zip(mids, cur["median_error"]) if m is not None]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.2))
        ax = fig.add_subplot()
        ax.axvspan(inner, mids[-1] + (edges[1] - edges[0]) / 2, color="#dddddd", label="edge band")
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, "o-", color="#e31a1c")
        ax.set_xlabel("spawn distance from map centre (m)")
        ax.set_ylabel("median error (m), fallbacks excluded")
        ax.set_ylim(bottom=0)
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def per_context(report: dict, path: Path) -> None:
    ctx = report["per_context"]
    names = sorted(ctx)
    metrics = [("top_1x1", "Top-1x1"), ("top_3x3", "Top-3x3"), ("recall@1", "recall@1m")]
    x = np.arange(len(names))
    w = 0.8 / len(metrics)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.2))
        ax = fig.add_subplot()
        for k, (key, label) in enumerate(metrics):
            vals = [ctx[n]["recall"].get("1", 0.0) if key == "recall@1" else ctx[n][key] for n in names]
            ax.bar(x + (k - 1) * w, vals, width=w, label=label)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 1)
        ax.set_ylabel("fraction")
        ax.legend(frameon=False, ncols=3, loc="upper center", bbox_to_anchor=(0.5, 1.15))
        fig.tight_layout()
        _save(fig, path)


def render_all(report: dict, out_dir) -> list[str]:
    out = Path(out_dir)
    error_density(report, out / FILES["error_density"])
    displacement(report, out / FILES["displacement"])
    per_context(report, out / FILES["contexts"])
    return sorted(FILES.values())
