"""Evaluation reports: CSV tables plus rendered matplotlib figures.

Every report path emits the delimited data and a figure next to it, so a run
directory is self-describing without further tooling.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .pipeline import EvalReport, SweepRow

_CSV_FIELDS = [
    "layer",
    "height_m",
    "count",
    "uncorrected_mse",
    "uncorrected_rmse_pct",
    "corrected_mse",
    "corrected_rmse_pct",
    "improvement",
]


def _num(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_report_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS + (["density"] if report.density_tag else []))
        improvement = report.improvement
        for k in range(len(report.layer_heights)):
            row = [
                k,
                _num(report.layer_heights[k]),
                int(report.counts[k]),
                _num(report.uncorrected_mse[k]),
                _num(report.uncorrected_rmse_pct[k]),
                _num(report.corrected_mse[k]),
                _num(report.corrected_rmse_pct[k]),
                _num(improvement[k]),
            ]
            if report.density_tag:
                row.append(report.density_tag)
            writer.writerow(row)
    return path


def plot_report(report: EvalReport, path) -> Path:
    """MSE over vegetation layers before and after correction."""
    path = Path(path)
    sel = report.evaluated_layers()
    heights = report.layer_heights[sel]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(heights, report.uncorrected_mse[sel], "o-", label="uncorrected", color="tab:red")
    if np.isfinite(report.corrected_mse[sel]).any():
        ax.plot(heights, report.corrected_mse[sel], "s-", label="corrected", color="tab:green")
    ax.set_xlabel("layer height AGL (m)")
    ax.set_ylabel("MSE (non-void voxels)")
    title = "reflectance error by layer"
    if report.density_tag:
        title += f" ({report.density_tag} trees/ha)"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def write_sweep_csv(rows: list[SweepRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["density", "seed"] + _CSV_FIELDS)
        for row in rows:
            report = row.report
            improvement = report.improvement
            for k in range(len(report.layer_heights)):
                writer.writerow(
                    [
                        _num(row.density),
                        row.seed,
                        k,
                        _num(report.layer_heights[k]),
                        int(report.counts[k]),
                        _num(report.uncorrected_mse[k]),
                        _num(report.uncorrected_rmse_pct[k]),
                        _num(report.corrected_mse[k]),
                        _num(report.corrected_rmse_pct[k]),
                        _num(improvement[k]),
                    ]
                )
    return path


def plot_sweep(rows: list[SweepRow], path, n_layer_groups: int = 4) -> Path:
    """Mean MSE versus density for a few representative layers (Fig-7B style)."""
    path = Path(path)
    densities = sorted({row.density for row in rows})
    vd = len(rows[0].report.layer_heights)
    evaluated = sorted(
        set(np.concatenate([row.report.evaluated_layers() for row in rows]))
    )
    if not evaluated:
        evaluated = list(range(vd))
    picks = np.unique(
        np.linspace(0, len(evaluated) - 1, min(n_layer_groups, len(evaluated))).astype(int)
    )
    layer_picks = [evaluated[i] for i in picks]

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    cmap = plt.get_cmap("viridis")
    for li, k in enumerate(layer_picks):
        color = cmap(li / max(len(layer_picks) - 1, 1))
        for corrected in (False, True):
            ys = []
            for d in densities:
                vals = [
                    (row.report.corrected_mse if corrected else row.report.uncorrected_mse)[k]
                    for row in rows
                    if row.density == d
                ]
                vals = [v for v in vals if np.isfinite(v)]
                ys.append(np.mean(vals) if vals else np.nan)
            height = rows[0].report.layer_heights[k]
            ax.plot(
                densities,
                ys,
                ("--" if corrected else "-") + "o",
                color=color,
                label=f"{height:.1f} m {'corrected' if corrected else 'uncorrected'}",
            )
    ax.set_xlabel("density (trees/ha)")
    ax.set_ylabel("mean MSE (non-void voxels)")
    ax.set_title("reflectance error across forest densities")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
