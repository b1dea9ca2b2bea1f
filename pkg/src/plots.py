"""Standalone SVG figures with the configuration hash embedded as provenance."""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")  # Non-interactive backend; figures are only written to disk
import matplotlib.pyplot as plt
import numpy as np

from curvature_estimates import DiagnosticsSeries

logger = logging.getLogger(__name__)

MONITOR_PANELS = [
    ("sup_v", "sup |phi + delta eta - psi|"),
    ("sup_phi_dot", "sup |d/dt phi|"),
    ("trace_defect_abs", "weighted trace defect"),
    ("sup_abs_twisted", "sup |R~|"),
    ("total_diameter", "diam(X, d_t)"),
    ("gh_bound", "GH upper bound"),
]


def save_svg(fig, path, config_hash: str) -> Path:
    """Write a figure as SVG with the config hash in its metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(
        path,
        format="svg",
        metadata={"Description": f"config_hash={config_hash}", "Date": None},
    )
    plt.close(fig)
    logger.debug(f"Wrote {path}")
    return path


def plot_monitors(
    series_by_eps: Mapping[float, DiagnosticsSeries], path, config_hash: str, title: str = ""
) -> Path:
    """Monitor-vs-t curves, one line per rung, logarithmic where values are positive."""
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    for ax, (column, label) in zip(axes.flat, MONITOR_PANELS):
        positive = True
        for eps in sorted(series_by_eps, reverse=True):
            series = series_by_eps[eps]
            if column not in series.columns or len(series) == 0:
                continue
            values = series.column(column)
            positive &= bool(np.all(values[1:] > 0.0))
            ax.plot(series.times, values, label=f"eps={eps:g}")
        if positive:
            ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_title(label)
        ax.grid(True, alpha=0.3)
    axes.flat[0].legend(fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return save_svg(fig, path, config_hash)


def plot_rates(rows: Sequence[Dict], path, config_hash: str, rate_key: str = "rate_sup_v") -> Path:
    """Fitted decay rate against beta across a sweep; failed fits are omitted."""
    points = [(row["beta"], row[rate_key]) for row in rows if row.get(rate_key) is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    if points:
        beta, rate = np.array(points).T
        ax.scatter(beta, rate)
    ax.axhline(0.75, linestyle="--", color="gray", label="3/4")
    ax.set_xlabel("beta")
    ax.set_ylabel(rate_key)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return save_svg(fig, path, config_hash)


def plot_limit(s: np.ndarray, psi_by_eps: Mapping[float, np.ndarray], path, config_hash: str) -> Path:
    """Limit potentials along the ladder."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for eps in sorted(psi_by_eps, reverse=True):
        ax.plot(s, psi_by_eps[eps], label=f"eps={eps:g}")
    ax.set_xlabel("s = log|z|^2")
    ax.set_ylabel("psi")
    ax.legend(fontsize="small")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return save_svg(fig, path, config_hash)


def report_figures(run_dir, series_by_stage: Mapping[str, Mapping[float, DiagnosticsSeries]], config_hash: str) -> List[Path]:
    """One monitor figure per stage that has diagnostics."""
    paths = []
    for stage, series in series_by_stage.items():
        if series:
            paths.append(plot_monitors(series, Path(run_dir) / "plots" / f"{stage}_monitors.svg", config_hash, stage))
    return paths
