"""Risk-bin reclassification between two models and subgroup Brier differences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricUnavailable, brier_td, censoring_km


@dataclass(frozen=True)
class RiskBins:
    """Left-closed bins ``[0, lower)``, ``[lower, upper)``, ``[upper, 1]``."""

    thresholds: tuple = (0.10, 0.20)
    labels: tuple = ("low", "intermediate", "high")

    def __post_init__(self):
        lo, hi = self.thresholds
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"need 0 < lower < upper < 1, got {self.thresholds}")
        if len(self.labels) != 3:
            raise ValueError("exactly three labels are needed")

    def index(self, risk) -> np.ndarray:
        return np.searchsorted(np.asarray(self.thresholds), np.asarray(risk, dtype=np.float64),
                               side="right")

    def label(self, risk) -> str:
        return self.labels[int(self.index(risk))]

    @property
    def boundary_rule(self) -> str:
        lo, hi = self.thresholds
        return f"[0,{lo}) {self.labels[0]}; [{lo},{hi}) {self.labels[1]}; [{hi},1] {self.labels[2]}"


def classify(model, x, horizon: float, risk: int, bins: RiskBins = RiskBins()):
    """Bin label(s) of the predicted risk by ``horizon``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    values = model.risk(np.atleast_2d(x), horizon, risk)
    labels = [bins.labels[i] for i in bins.index(values)]
    return labels[0] if np.ndim(x) == 1 else labels


@dataclass
class RiskMatrix:
    counts: np.ndarray
    stratum: str
    cohort: str = "all patients"
    labels: tuple = RiskBins().labels

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"stratum": self.stratum, "cohort": self.cohort, "labels": list(self.labels),
                "counts": self.counts.tolist(), "row_totals": self.counts.sum(axis=1).tolist(),
                "col_totals": self.counts.sum(axis=0).tolist(), "total": self.total}

    def render(self, name_a: str = "A", name_b: str = "B") -> str:
        head = [f"{name_a} \\ {name_b}", *self.labels, "Total"]
        body = [[lab, *map(str, row), str(row.sum())] for lab, row in zip(self.labels, self.counts)]
        body.append(["Total", *map(str, self.counts.sum(axis=0)), str(self.total)])
        widths = [max(len(c) for c in col) for col in zip(head, *body)]
        lines = [f"{self.stratum} ({self.cohort})",
                 "  ".join(h.rjust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines) + "\n"


def reclassification_table(risk_a, risk_b, times, events, horizon: float, risk: int,
                           bins: RiskBins = RiskBins(), mask=None, cohort: str = "all patients"):
    """(event-free matrix, event matrix) from precomputed risks.

    Patients censored before ``horizon`` are dropped.  The event stratum holds
    patients with the focal risk by ``horizon``; everyone else, including
    competing-event patients, is event-free.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    keep = ~((times < horizon) & (events == 0))
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ValueError("cohort is empty after filtering")
    had_event = (events == risk) & (times <= horizon)
    ia, ib = bins.index(risk_a), bins.index(risk_b)
    out = []
    for stratum, sel in (("event-free", keep & ~had_event), ("event", keep & had_event)):
        counts = np.zeros((3, 3), dtype=np.int64)
        np.add.at(counts, (ia[sel], ib[sel]), 1)
        out.append(RiskMatrix(counts, stratum, cohort, bins.labels))
    return tuple(out)


def reclassification_matrix(model_a, model_b, dataset, horizon: float, risk: int,
                            bins: RiskBins = RiskBins(), mask=None, cohort: str = "all patients"):
    if model_a.n_features != model_b.n_features:
        raise ValueError("models do not share a covariate schema")
    X = dataset.covariates
    return reclassification_table(model_a.risk(X, horizon, risk), model_b.risk(X, horizon, risk),
                                  dataset.times, dataset.events, horizon, risk, bins, mask, cohort)


def group_labels(edges) -> list[str]:
    edges = list(edges)
    labels = [f"<{edges[0]:g}"]
    labels += [f"{a:g}-{b:g}" for a, b in zip(edges[:-1], edges[1:])]
    labels.append(f"{edges[-1]:g}+")
    return labels


@dataclass
class SubgroupDiff:
    groups: list
    horizons: list
    values: dict = field(default_factory=dict)  # group -> horizon -> per-fold differences

    def summary(self) -> dict:
        out = {}
        for g in self.groups:
            out[g] = {}
            for h in self.horizons:
                vals = [v for v in self.values[g][h] if v is not None]
                if not vals:
                    out[g][h] = None
                    continue
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                out[g][h] = {"mean": float(np.mean(vals)), "sd": sd}
        return out

    def render(self) -> str:
        summ = self.summary()
        head = ["Group", *self.horizons]
        body = [[g, *("-" if summ[g][h] is None else f"{summ[g][h]['mean']:.3f} ({summ[g][h]['sd']:.3f})"
                      for h in self.horizons)] for g in self.groups]
        widths = [max(len(c) for c in col) for col in zip(head, *body)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines) + "\n"


def subgroup_brier_diff(folds, column: str, edges, horizons: dict, risk: int) -> SubgroupDiff:
    """Brier(model A) - Brier(model B) per group of ``column`` and horizon, per fold.

    ``folds`` is a list of ``(model_a, model_b, test_dataset)``; groups are
    ``[edge_k, edge_{k+1})`` with open-ended first and last groups.  The
    censoring distribution is estimated on the whole fold.
    """
    labels = group_labels(edges)
    diff = SubgroupDiff(labels, list(horizons))
    diff.values = {g: {h: [] for h in horizons} for g in labels}
    for model_a, model_b, data in folds:
        group = np.searchsorted(np.asarray(edges, dtype=np.float64), data.column(column), side="right")
        G = censoring_km(data.times, data.events)
        for name, h in horizons.items():
            pa = model_a.risk(data.covariates, h, risk)
            pb = model_b.risk(data.covariates, h, risk)
            for gi, g in enumerate(labels):
                sel = group == gi
                if not sel.any():
                    diff.values[g][name].append(None)
                    continue
                try:
                    a = brier_td(pa[sel], data.times[sel], data.events[sel], risk, h, G)
                    b = brier_td(pb[sel], data.times[sel], data.events[sel], risk, h, G)
                    diff.values[g][name].append(a - b)
                except MetricUnavailable:
                    diff.values[g][name].append(None)
    return diff
