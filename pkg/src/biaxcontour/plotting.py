"""Figures and plot-data files for closed-loop runs.

The CSV writers need nothing beyond the standard library. Rendering imports
matplotlib lazily (install the ``plot`` extra).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .pathkit import ContourPath, end_effector


def sample_path(path: ContourPath, step: float = 2e-4) -> np.ndarray:
    """Points along ``path`` at roughly ``step`` spacing."""
    pts = []
    for seg in path.segments:
        n = max(2, int(np.ceil(seg.length / step)) + 1)
        pts.extend(seg.point(s) for s in np.linspace(0.0, seg.length, n))
    return np.array(pts)


def write_plot_data(trace, path: ContourPath, D: float, outdir, stem: str) -> list[Path]:
    """Contour (desired vs actual) and error-vs-time CSVs for any plotting tool."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    x_e, y_e = end_effector(trace.column("x_h"), trace.column("y_n"), trace.column("theta"), D)
    desired = sample_path(path)
    f1 = outdir / f"{stem}-contour.csv"
    with open(f1, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        w.writerows(("desired", repr(float(a)), repr(float(b))) for a, b in desired)
        w.writerows(("actual", repr(float(a)), repr(float(b))) for a, b in zip(x_e, y_e))
    f2 = outdir / f"{stem}-errors.csv"
    with open(f2, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "e_x", "e_y", "eps", "theta"])
        for r in trace.rows:
            w.writerow([repr(float(r[k])) for k in ("t", "e_x", "e_y", "eps", "theta")])
    return [f1, f2]


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as err:
        raise RuntimeError("figure rendering needs matplotlib (pip install 'biaxcontour[plot]')") from err
    return plt


def render_runs(traces: dict, path: ContourPath | None, budget, outdir) -> list[Path]:
    """Contour overlay and error time series for one or more named traces."""
    plt = _pyplot()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []

    fig, ax = plt.subplots(figsize=(5, 5))
    if path is not None:
        d = sample_path(path)
        ax.plot(d[:, 0] * 1e3, d[:, 1] * 1e3, "k--", lw=1, label="desired")
    for name, tr in traces.items():
        x_e, y_e = end_effector(tr.column("x_h"), tr.column("y_n"), tr.column("theta"), budget.D)
        ax.plot(x_e * 1e3, y_e * 1e3, lw=1, label=name)
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("y [mm]")
    ax.set_aspect("equal")
    ax.legend()
    f = outdir / "contour.png"
    fig.savefig(f, dpi=120, bbox_inches="tight")
    plt.close(fig)
    files.append(f)

    fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
    limits = (budget.eps_x, budget.eps_y, budget.eps_c)
    for ax, col, lim in zip(axes, ("e_x", "e_y", "eps"), limits):
        for name, tr in traces.items():
            ax.plot(tr.column("t"), tr.column(col) * 1e3, lw=0.8, label=name)
        ax.axhline(lim * 1e3, color="r", lw=0.8, ls=":")
        if col != "eps":
            ax.axhline(-lim * 1e3, color="r", lw=0.8, ls=":")
        ax.set_ylabel(f"{col} [mm]")
    axes[-1].set_xlabel("t [s]")
    axes[0].legend(loc="upper right")
    f = outdir / "errors.png"
    fig.savefig(f, dpi=120, bbox_inches="tight")
    plt.close(fig)
    files.append(f)
    return files


__all__ = ["render_runs", "sample_path", "write_plot_data"]
