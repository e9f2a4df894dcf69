"""Figure rendering for experiment outputs.

Every experiment writes delimited data (CSV/JSONL); this module turns those
files into matplotlib figures saved alongside them. Rendering is strictly a
view over the emitted data: figures are regenerated from the files, never
from in-memory state, so a report can be re-run on any results directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_map_overlay",
    "render_report",
]

_DPI = 150


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [dict(r) for r in csv.DictReader(f)]


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _num(row: dict, key: str, default: float = float("nan")) -> float:
    try:
        return float(row[key])
    except (KeyError, TypeError, ValueError):
        return default


def render_map_overlay(
    image: np.ndarray, saliency: np.ndarray, path: "str | Path", title: str = ""
) -> Path:
    """Image, map, and overlay side by side."""
    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.6))
    img = np.asarray(image)
    axes[0].imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
    axes[0].set_title("input")
    im = axes[1].imshow(saliency, cmap="jet")
    axes[1].set_title("saliency")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[2].imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
    axes[2].imshow(saliency, cmap="jet", alpha=0.5)
    axes[2].set_title("overlay")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def _fig_sweep_metrics(rows: list[dict], out: Path) -> list[Path]:
    """Mean metric value per (polygons, p1) cell, one heatmap per metric."""
    made: list[Path] = []
    usable = [
        r
        for r in rows
        if "error" not in r and r.get("value") not in (None, "") and r.get("metric")
    ]
    metrics = sorted(
        {
            r["metric"]
            for r in usable
            if not str(r["metric"]).endswith(("_abs_delta", "_rel_delta", "_norm_delta"))
            and not str(r["metric"]).startswith("convergence@")
        }
    )
    for metric in metrics:
        sub = [r for r in usable if r["metric"] == metric]
        algos = sorted({r.get("algorithm", "?") for r in sub})
        fig, axes = plt.subplots(1, len(algos), figsize=(5.2 * len(algos), 4.2), squeeze=False)
        for ax, algo in zip(axes[0], algos):
            cells = [r for r in sub if r.get("algorithm") == algo]
            polys = sorted({int(_num(r, "polygons")) for r in cells})
            p1s = sorted({_num(r, "p1") for r in cells})
            grid = np.full((len(p1s), len(polys)), np.nan)
            for r in cells:
                i = p1s.index(_num(r, "p1"))
                j = polys.index(int(_num(r, "polygons")))
                v = _num(r, "value")
                grid[i, j] = v if np.isnan(grid[i, j]) else (grid[i, j] + v) / 2.0
            im = ax.imshow(grid, aspect="auto", cmap="viridis", origin="lower")
            ax.set_xticks(range(len(polys)), [str(p) for p in polys])
            ax.set_yticks(range(len(p1s)), [f"{p:g}" for p in p1s])
            ax.set_xlabel("polygons")
            ax.set_ylabel("p1")
            ax.set_title(f"{metric} ({algo})")
            fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        target = out / f"sweep_{metric}.png"
        fig.savefig(target, dpi=_DPI)
        plt.close(fig)
        made.append(target)
    return made


def _fig_sweep_deltas(rows: list[dict], out: Path) -> list[Path]:
    deltas = [
        r
        for r in rows
        if "error" not in r
        and str(r.get("metric", "")).endswith("_rel_delta")
        and r.get("value") not in (None, "")
    ]
    if not deltas:
        return []
    by_metric: dict[str, list[float]] = {}
    for r in deltas:
        by_metric.setdefault(r["metric"], []).append(_num(r, "value"))
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(by_metric), 4.0))
    names = sorted(by_metric)
    means = [float(np.mean(by_metric[m])) for m in names]
    ax.bar(range(len(names)), means, color="#4878d0")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(names)), [n.removesuffix("_rel_delta") for n in names], rotation=20)
    ax.set_ylabel("mean relative improvement")
    ax.set_title("improvement over grid-mask baseline")
    fig.tight_layout()
    target = out / "sweep_improvement.png"
    fig.savefig(target, dpi=_DPI)
    plt.close(fig)
    return [target]


def _fig_convergence(rows: list[dict], out: Path) -> list[Path]:
    conv = [
        r
        for r in rows
        if "error" not in r
        and str(r.get("metric", "")).startswith("convergence@")
        and r.get("value") not in (None, "")
    ]
    if not conv:
        return []
    by_digest: dict[str, dict[int, list[float]]] = {}
    for r in conv:
        n = int(str(r["metric"]).split("@", 1)[1])
        by_digest.setdefault(r["digest"], {}).setdefault(n, []).append(_num(r, "value"))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for digest, series in sorted(by_digest.items()):
        ns = sorted(series)
        ax.plot(ns, [float(np.mean(series[n])) for n in ns], marker="o", label=digest[:8])
    ax.set_xlabel("masks")
    ax.set_ylabel("SSIM to final map")
    ax.set_title("convergence toward the final map")
    ax.legend(fontsize=8)
    fig.tight_layout()
    target = out / "sweep_convergence.png"
    fig.savefig(target, dpi=_DPI)
    plt.close(fig)
    return [target]


def _fig_sigma(rank_rows: list[dict], out: Path) -> list[Path]:
    sides = sorted({int(_num(r, "side")) for r in rank_rows})
    fig, ax = plt.subplots(figsize=(6.8, 4.4))
    for side in sides:
        sub = sorted(
            (r for r in rank_rows if int(_num(r, "side")) == side),
            key=lambda r: _num(r, "sigma"),
        )
        xs = [_num(r, "sigma") for r in sub]
        ys = [_num(r, "mean_ssim") for r in sub]
        (line,) = ax.plot(xs, ys, marker="o", label=f"{side}x{side}")
        pub = next((r for r in sub if str(r.get("is_published_pair")).lower() == "true"), None)
        if pub is not None:
            ax.scatter(
                [_num(pub, "sigma")],
                [_num(pub, "mean_ssim")],
                marker="*",
                s=180,
                color=line.get_color(),
                zorder=5,
                edgecolor="black",
            )
    ax.set_xlabel("blur strength (sigma)")
    ax.set_ylabel("mean SSIM to grid reference")
    ax.set_title("blur strength matching (stars: published pairings)")
    ax.legend(title="grid")
    fig.tight_layout()
    target = out / "sigma_matching.png"
    fig.savefig(target, dpi=_DPI)
    plt.close(fig)
    return [target]


def _fig_fp16(summary_rows: list[dict], out: Path) -> list[Path]:
    rows = sorted(summary_rows, key=lambda r: r.get("combo", ""))
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(8.6, 4.4))
    xs = np.arange(len(rows))
    means = np.array([_num(r, "rel_delta_mean") for r in rows])
    lows = means - np.array([_num(r, "rel_delta_min") for r in rows])
    highs = np.array([_num(r, "rel_delta_max") for r in rows]) - means
    ax.bar(xs, means, yerr=[lows, highs], capsize=3, color="#ee854a")
    tol = _num(rows[0], "tolerance", 0.05)
    ax.axhline(tol, color="gray", linestyle="--", linewidth=0.8)
    ax.axhline(-tol, color="gray", linestyle="--", linewidth=0.8)
    for x, r in zip(xs, rows):
        share = _num(r, "share_within_tolerance")
        ax.annotate(f"{share:.0%}", (x, 0), textcoords="offset points", xytext=(0, -14), ha="center", fontsize=8)
    ax.set_xticks(xs, [r["combo"] for r in rows], rotation=25, fontsize=8)
    ax.set_ylabel("relative game-score delta vs all-fp32")
    ax.set_title("half-precision stage combinations (labels: share within tolerance)")
    fig.tight_layout()
    target = out / "fp16_ab.png"
    fig.savefig(target, dpi=_DPI)
    plt.close(fig)
    return [target]


def _fig_guarantee(rows: list[dict], out: Path) -> list[Path]:
    groups = ("baseline", "guaranteed")
    made: list[Path] = []
    for measure, label in (
        ("ssim_to_reference", "SSIM to reference maps"),
        ("intra_consistency", "intra-group consistency"),
    ):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for group in groups:
            sub = sorted(
                (r for r in rows if r.get("group") == group),
                key=lambda r: _num(r, "n_masks"),
            )
            if not sub:
                continue
            ax.plot(
                [_num(r, "n_masks") for r in sub],
                [_num(r, measure) for r in sub],
                marker="o",
                label=group,
            )
        ax.set_xlabel("masks")
        ax.set_ylabel(label)
        ax.set_title(f"informativeness guarantee: {label}")
        ax.legend()
        fig.tight_layout()
        target = out / f"guarantee_{measure}.png"
        fig.savefig(target, dpi=_DPI)
        plt.close(fig)
        made.append(target)
    return made


def _fig_altgame(curves: "list[tuple[str, list[dict]]]", out: Path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(6.8, 4.4))
    for variant, rows in curves:
        xs = [_num(r, "pixels_altered") for r in rows]
        ys = [_num(r, "score") for r in rows]
        area = float(np.mean(ys)) if ys else float("nan")
        ax.plot(xs, ys, marker=".", label=f"{variant} (area {area:.3f})")
    ax.set_xlabel("pixels altered")
    ax.set_ylabel("class score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("alteration games")
    ax.legend()
    fig.tight_layout()
    target = out / "alteration_games.png"
    fig.savefig(target, dpi=_DPI)
    plt.close(fig)
    return [target]


def render_report(results_dir: "str | Path") -> list[Path]:
    """Render every figure the files in ``results_dir`` support.

    Looks for ``results.jsonl`` (sweep), ``altgame_<variant>.csv`` curves,
    ``sigma_match_ranking.csv``, ``fp16_ab_summary.csv``, and
    ``guarantee.csv``; writes PNGs into ``<results_dir>/figures``.
    """
    root = Path(results_dir)
    out = root / "figures"
    out.mkdir(parents=True, exist_ok=True)
    made: list[Path] = []

    curves = sorted(root.glob("altgame_*.csv"))
    if curves:
        made += _fig_altgame(
            [(p.stem.removeprefix("altgame_"), _read_csv(p)) for p in curves], out
        )

    journal = root / "results.jsonl"
    if journal.exists():
        rows = _read_jsonl(journal)
        made += _fig_sweep_metrics(rows, out)
        made += _fig_sweep_deltas(rows, out)
        made += _fig_convergence(rows, out)

    ranking = root / "sigma_match_ranking.csv"
    if ranking.exists():
        made += _fig_sigma(_read_csv(ranking), out)

    fp16 = root / "fp16_ab_summary.csv"
    if fp16.exists():
        made += _fig_fp16(_read_csv(fp16), out)

    guarantee = root / "guarantee.csv"
    if guarantee.exists():
        made += _fig_guarantee(_read_csv(guarantee), out)

    return made
