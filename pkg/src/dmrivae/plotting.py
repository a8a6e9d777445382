"""Matplotlib figures written next to the CSV outputs (no interactive display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import CLUSTER_COLORS  # noqa: E402

FIG_FORMATS = ("png", "svg")


def _save(fig, path, fmt: str = "png") -> Path:
    if fmt not in FIG_FORMATS:
        raise ValueError(f"figure format must be one of {FIG_FORMATS}")
    path = Path(path).with_suffix("." + fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _scatter_panel(ax, truth, pred, labels, title=None):
    labels = np.zeros(len(truth), dtype=int) if labels is None else np.asarray(labels)
    for k in np.unique(labels):
        sel = labels == k
        ax.scatter(truth[sel], pred[sel], s=2, alpha=0.4,
                   color=CLUSTER_COLORS[int(k) % len(CLUSTER_COLORS)], label=f"cluster {int(k) + 1}")
    lo = float(min(truth.min(), pred.min()))
    hi = float(max(truth.max(), pred.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    if title:
        ax.set_title(title, fontsize=9)


def scatter_figure(truth, pred, labels, param: str, path, fmt: str = "png") -> Path:
    """Prediction vs ground truth for one parameter, coloured by cluster."""
    fig, ax = plt.subplots(figsize=(4, 4))
    _scatter_panel(ax, np.asarray(truth), np.asarray(pred), labels)
    ax.set_xlabel(f"true {param}")
    ax.set_ylabel(f"predicted {param}")
    ax.legend(markerscale=4, fontsize=7, loc="upper left")
    return _save(fig, path, fmt)


def comparison_grid(panels, param: str, path, fmt: str = "png") -> Path:
    """Grid of scatter panels.

    ``panels`` maps ``(row_label, col_label)`` to ``(truth, pred, labels)``.
    Rows are usually fitters and columns noise levels.
    """
    rows = list(dict.fromkeys(r for r, _ in panels))
    cols = list(dict.fromkeys(c for _, c in panels))
    fig, axes = plt.subplots(len(rows), len(cols), figsize=(3 * len(cols), 3 * len(rows)),
                             squeeze=False, sharex=True, sharey=True)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            ax = axes[i, j]
            if (r, c) not in panels:
                ax.axis("off")
                continue
            t, p, lab = panels[(r, c)]
            _scatter_panel(ax, np.asarray(t), np.asarray(p), lab, f"{r}, {c}")
        axes[i, 0].set_ylabel(f"predicted {param}")
    for j in range(len(cols)):
        axes[-1, j].set_xlabel(f"true {param}")
    return _save(fig, path, fmt)


def sweep_figure(values, metrics: dict, xlabel: str, path, fmt: str = "png") -> Path:
    """Metric-vs-hyperparameter curves; ``metrics`` maps a label to a list of values."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, ys in metrics.items():
        ax.plot(values, ys, "o-", label=label)
    if all(v > 0 for v in values) and max(values) / min(values) > 50:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=7)
    return _save(fig, path, fmt)


def latent_figure(posterior, path, fmt: str = "png", bins: int = 60) -> Path:
    """Histograms of the posterior means; GMM voxels are split by their dominant component."""
    mu = posterior.mu
    L = mu.shape[1]
    fig, axes = plt.subplots(1, L, figsize=(3 * L, 2.8), squeeze=False)
    groups = np.zeros(len(mu), dtype=int) if posterior.c is None else np.argmax(posterior.c, axis=1)
    for d in range(L):
        ax = axes[0, d]
        edges = np.histogram_bin_edges(mu[:, d], bins=bins)
        for k in np.unique(groups):
            ax.hist(mu[groups == k, d], bins=edges, alpha=0.6,
                    color=CLUSTER_COLORS[int(k) % len(CLUSTER_COLORS)],
                    label=None if posterior.c is None else f"component {int(k)}")
        ax.set_xlabel(f"z[{d}] posterior mean")
    if posterior.c is not None:
        axes[0, 0].legend(fontsize=7)
    return _save(fig, path, fmt)
