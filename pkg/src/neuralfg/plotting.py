"""PNG figures for reports.

Figures are built with the object-oriented Agg API (no pyplot global state)
and saved without the software/date metadata chunk, so identical inputs give
identical bytes.
"""
from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_META = {"Software": None}


def _figure(width: float = 6.4, height: float = 4.0) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path, meta: str | None = None) -> None:
    """Write a PNG; ``meta`` (e.g. a JSON run record) goes into a text chunk."""
    fig.tight_layout()
    info = dict(_PNG_META)
    if meta is not None:
        info["Description"] = meta
    fig.savefig(path, format="png", metadata=info)


def plot_cif_curves(model, X, path, n_points: int = 100, t_max: float | None = None,
                    labels=None, meta: str | None = None) -> None:
    """Predicted CIF of every risk over time, one line per (patient, risk)."""
    X = np.atleast_2d(X)
    t_max = model.t_scale if t_max is None else t_max
    grid = np.linspace(0.0, t_max, n_points)
    fig = _figure()
    ax = fig.add_subplot()
    for r in range(1, model.n_risks + 1):
        curves = model.risk_grid(X, grid, r)
        for i, row in enumerate(curves):
            who = labels[i] if labels is not None else f"patient {i}"
            ax.plot(grid, row, color=f"C{r - 1}", alpha=0.8, linestyle="-" if i == 0 else "--",
                    label=f"risk {r}, {who}")
    ax.set_xlabel("time")
    ax.set_ylabel("cumulative incidence")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize="small")
    _save(fig, path, meta)


def plot_metrics_by_horizon(report, path, meta: str | None = None) -> None:
    """C-index and Brier score (fold mean with sd error bars) per risk and horizon."""
    summ = report.summary().get("horizons", {})
    qs = report.horizons.keys
    fig = _figure(8.0, 3.6)
    for k, metric in enumerate(("c_index", "brier")):
        ax = fig.add_subplot(1, 2, k + 1)
        for j, (r, per_h) in enumerate(sorted(summ.items())):
            xs, mean, sd = [], [], []
            for i, q in enumerate(qs):
                cell = per_h.get(q, {}).get(metric)
                if cell is not None:
                    xs.append(i + 0.08 * j)
                    mean.append(cell["mean"])
                    sd.append(cell["sd"])
            ax.errorbar(xs, mean, yerr=sd, marker="o", capsize=3, label=f"risk {r}")
        ax.set_xticks(range(len(qs)), qs)
        ax.set_title("C-index" if metric == "c_index" else "Brier score")
        ax.legend(fontsize="small")
    _save(fig, path, meta)


def plot_benchmark(report, path, meta: str | None = None) -> None:
    rows = [r for r in report.rows if r.degree is not None]
    fig = _figure(5.0, 3.6)
    ax = fig.add_subplot()
    ax.plot([r.degree for r in rows], [r.ratio for r in rows], marker="o")
    ax.axhline(1.0, color="grey", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("quadrature points")
    ax.set_ylabel("time relative to exact likelihood")
    _save(fig, path, meta)


def plot_reclassification(matrices, path, name_a: str = "A", name_b: str = "B",
                          meta: str | None = None) -> None:
    """Side-by-side count heatmaps, one per outcome stratum."""
    fig = _figure(4.0 * len(matrices), 3.8)
    for k, m in enumerate(matrices):
        ax = fig.add_subplot(1, len(matrices), k + 1)
        ax.imshow(m.counts, cmap="Blues")
        for (i, j), c in np.ndenumerate(m.counts):
            ax.text(j, i, str(c), ha="center", va="center")
        ax.set_xticks(range(3), m.labels)
        ax.set_yticks(range(3), m.labels)
        ax.set_xlabel(name_b)
        ax.set_ylabel(name_a)
        ax.set_title(m.stratum)
    _save(fig, path, meta)


def plot_training_curve(history, path, meta: str | None = None) -> None:
    epochs = [e["epoch"] for e in history.epochs]
    fig = _figure(5.0, 3.6)
    ax = fig.add_subplot()
    ax.plot(epochs, [e["train_nll"] for e in history.epochs], label="train")
    ax.plot(epochs, [e["val_nll"] for e in history.epochs], label="validation")
    if history.best_epoch is not None and history.best_epoch >= 0:
        ax.axvline(history.best_epoch, color="grey", linestyle=":", label="restored")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL per patient")
    ax.legend(fontsize="small")
    _save(fig, path, meta)
