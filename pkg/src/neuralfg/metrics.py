"""Censoring-adjusted evaluation of competing-risks predictions.

Inverse-probability-of-censoring weights use the Kaplan-Meier estimate of
the censoring distribution, evaluated just before the time of interest::

    w(u) = 1 / max(G(u-), G_MIN)

When the clipping at ``G_MIN`` accounts for more than ``CLIP_MASS_LIMIT`` of
a metric's total weight mass the metric is reported as unavailable.
Prediction ties count one half in the C-index and the AUC.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

G_MIN = 0.05
CLIP_MASS_LIMIT = 0.05
QUANTILE_LEVELS = (0.25, 0.50, 0.75)
METRIC_NAMES = ("c_index", "brier", "auc")
C_INDEX_WEIGHTING = "w(t_i)^2"


class MetricUnavailable(ValueError):
    """The metric is not estimable on this data (no pairs, no cases, unstable weights)."""


# -- Kaplan-Meier --------------------------------------------------------------

@dataclass
class KaplanMeier:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Right-continuous ``S(t)``."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)

    def left(self, t) -> np.ndarray:
        """``S(t-)``, the value just before ``t``."""
        idx = np.searchsorted(self.times, t, side="left") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)


def km_fit(times, indicator) -> KaplanMeier:
    """Product-limit estimator; ``indicator`` marks the events being counted."""
    times = np.asarray(times, dtype=np.float64)
    indicator = np.asarray(indicator, dtype=bool)
    if times.size == 0:
        raise ValueError("km_fit needs at least one observation")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    uniq, inverse = np.unique(times, return_inverse=True)
    n_events = np.bincount(inverse, weights=indicator, minlength=uniq.size)
    n_total = np.bincount(inverse, minlength=uniq.size)
    at_risk = times.size - np.concatenate([[0], np.cumsum(n_total)[:-1]])
    factors = 1.0 - n_events / at_risk
    return KaplanMeier(uniq, np.cumprod(factors), at_risk.astype(np.int64),
                       n_events.astype(np.int64))


def censoring_km(times, events) -> KaplanMeier:
    return km_fit(times, np.asarray(events) == 0)


def _weights(G: KaplanMeier, u):
    g = G.left(np.asarray(u, dtype=np.float64))
    clipped = g < G_MIN
    return 1.0 / np.maximum(g, G_MIN), clipped


def _check_clip_mass(weights: np.ndarray, clipped: np.ndarray, what: str) -> None:
    total = weights.sum()
    if total > 0 and weights[clipped].sum() > CLIP_MASS_LIMIT * total:
        raise MetricUnavailable(f"{what}: censoring weights clipped for more than "
                                f"{CLIP_MASS_LIMIT:.0%} of the weight mass")


def _prepare(pred, times, events):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events).reshape(-1)
    if not pred.shape == times.shape == events.shape:
        raise ValueError("predictions, times and events must have the same length")
    return pred, times, events


def _concordance_rows(pred_cases: np.ndarray, pred_others: np.ndarray, mask: np.ndarray):
    """Per case: (concordant + ties/2, comparable count) against masked others."""
    gt = (pred_cases[:, None] > pred_others) & mask
    eq = (pred_cases[:, None] == pred_others) & mask
    return gt.sum(axis=1) + 0.5 * eq.sum(axis=1), mask.sum(axis=1)


_BLOCK = 256


# -- time-dependent metrics ---------------------------------------------------

def c_index_td(pred, times, events, risk: int, horizon: float, censoring: KaplanMeier | None = None) -> float:
    """Antolini concordance truncated at ``horizon`` for risk ``risk``.

    Comparable pairs: ``d_i = risk``, ``t_i < t_j``, ``t_i <= horizon``;
    each pair weighted by ``w(t_i)^2``.
    """
    pred, times, events = _prepare(pred, times, events)
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    G = censoring_km(times, events) if censoring is None else censoring
    cases = np.flatnonzero((events == risk) & (times <= horizon))
    num = den = clip_mass = 0.0
    for start in range(0, cases.size, _BLOCK):
        block = cases[start:start + _BLOCK]
        mask = times[None, :] > times[block, None]
        conc, count = _concordance_rows(pred[block], pred[None, :], mask)
        w, clipped = _weights(G, times[block])
        w2 = w * w
        num += float(np.dot(w2, conc))
        den += float(np.dot(w2, count))
        clip_mass += float(np.dot(w2[clipped], count[clipped]))
    if den == 0:
        raise MetricUnavailable("c_index: no comparable pairs")
    if clip_mass > CLIP_MASS_LIMIT * den:
        raise MetricUnavailable("c_index: censoring weights clipped for too much weight mass")
    return num / den


def brier_td(pred, times, events, risk: int, horizon: float, censoring: KaplanMeier | None = None) -> float:
    """IPCW Brier score of risk ``risk`` at ``horizon``.

    ``(1/n) sum_i [w(t_i) 1{d_i=r, t_i<=t} (1-F_i)^2 + w(t) 1{t_i>t} F_i^2]``;
    censored and competing-event patients with ``t_i <= t`` contribute 0.
    """
    pred, times, events = _prepare(pred, times, events)
    G = censoring_km(times, events) if censoring is None else censoring
    if float(G.left(horizon)) <= 0.0:
        raise MetricUnavailable("brier: censoring survival reaches 0 before the horizon")
    case = (events == risk) & (times <= horizon)
    alive = times > horizon
    w_case, clip_case = _weights(G, times[case])
    w_h, clip_h = _weights(G, horizon)
    w_alive = np.full(int(alive.sum()), float(w_h))
    _check_clip_mass(np.concatenate([w_case, w_alive]),
                     np.concatenate([clip_case, np.full(w_alive.size, bool(clip_h))]), "brier")
    total = np.dot(w_case, (1.0 - pred[case]) ** 2) + float(w_h) * np.sum(pred[alive] ** 2)
    return float(total / pred.size)


def auc_td(pred, times, events, risk: int, horizon: float, censoring: KaplanMeier | None = None) -> float:
    """Cumulative/dynamic AUC: cases ``d_i=r, t_i<=t`` (weight ``w(t_i)``) vs controls ``t_i>t``."""
    pred, times, events = _prepare(pred, times, events)
    G = censoring_km(times, events) if censoring is None else censoring
    cases = np.flatnonzero((events == risk) & (times <= horizon))
    controls = np.flatnonzero(times > horizon)
    if cases.size == 0 or controls.size == 0:
        raise MetricUnavailable("auc: needs at least one case and one control")
    w_case, clip_case = _weights(G, times[cases])
    _, clip_h = _weights(G, horizon)
    if clip_h:
        raise MetricUnavailable("auc: censoring weight at the horizon is clipped")
    _check_clip_mass(w_case, clip_case, "auc")
    num = den = 0.0
    for start in range(0, cases.size, _BLOCK):
        block = slice(start, start + _BLOCK)
        pc = pred[cases[block]]
        mask = np.ones((pc.size, controls.size), dtype=bool)
        conc, count = _concordance_rows(pc, pred[None, controls], mask)
        # numerator and denominator share one summation order, so a perfect
        # ranking gives exactly 1
        num += float(np.dot(w_case[block], conc))
        den += float(np.dot(w_case[block], count))
    return num / den


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing with at least two points")
    return grid


def integrated_brier(grid, pred_grid, times, events, risk: int,
                     censoring: KaplanMeier | None = None) -> float:
    """Trapezoidal integral of the Brier score over ``grid``, divided by its span.

    ``pred_grid[i, k]`` is patient ``i``'s predicted risk at ``grid[k]``.
    """
    grid = _check_grid(grid)
    pred_grid = np.asarray(pred_grid, dtype=np.float64)
    G = censoring_km(times, events) if censoring is None else censoring
    scores = np.array([brier_td(pred_grid[:, k], times, events, risk, grid[k], G)
                       for k in range(grid.size)])
    span = grid[-1] - grid[0]
    return float(np.sum(0.5 * (scores[1:] + scores[:-1]) * np.diff(grid)) / span)


def overall_c_index(grid, pred_grid, times, events, risk: int,
                    censoring: KaplanMeier | None = None) -> float:
    """Time-dependent C-index over the whole grid.

    Each case is compared at its own event time, using the first grid point
    at or after it.  Pairs are weighted as in :func:`c_index_td`.
    """
    grid = _check_grid(grid)
    pred_grid = np.asarray(pred_grid, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    G = censoring_km(times, events) if censoring is None else censoring
    cases = np.flatnonzero((events == risk) & (times <= grid[-1]))
    cols = np.minimum(np.searchsorted(grid, times[cases], side="left"), grid.size - 1)
    num = den = clip_mass = 0.0
    for start in range(0, cases.size, _BLOCK):
        block = cases[start:start + _BLOCK]
        cb = cols[start:start + _BLOCK]
        mask = times[None, :] > times[block, None]
        own = pred_grid[block, cb]
        others = pred_grid[:, cb].T
        conc, count = _concordance_rows(own, others, mask)
        w, clipped = _weights(G, times[block])
        w2 = w * w
        num += float(np.dot(w2, conc))
        den += float(np.dot(w2, count))
        clip_mass += float(np.dot(w2[clipped], count[clipped]))
    if den == 0:
        raise MetricUnavailable("overall c_index: no comparable pairs")
    if clip_mass > CLIP_MASS_LIMIT * den:
        raise MetricUnavailable("overall c_index: censoring weights clipped for too much weight mass")
    return num / den


def cumulative_metrics(grid, pred_grid, times, events, risk: int) -> tuple:
    """(integrated Brier score, overall C-index); an unavailable entry is ``None``."""
    G = censoring_km(times, events)
    return (_safe(integrated_brier, grid, pred_grid, times, events, risk, G),
            _safe(overall_c_index, grid, pred_grid, times, events, risk, G))


def default_grid(times, events, n: int = 100) -> np.ndarray:
    t_max = float(np.max(np.asarray(times)[np.asarray(events) > 0]))
    return np.linspace(t_max / n, t_max, n)


# -- horizons ---------------------------------------------------------------

@dataclass
class EvalHorizons:
    levels: tuple  # quantile levels, or None entries for user-given times
    times: tuple

    @classmethod
    def fixed(cls, times) -> "EvalHorizons":
        times = tuple(float(t) for t in times)
        return cls((None,) * len(times), times)

    @property
    def keys(self) -> list[str]:
        return [f"t={t:g}" if lvl is None else f"q{lvl:.2f}"
                for lvl, t in zip(self.levels, self.times)]

    def to_dict(self) -> dict:
        return dict(zip(self.keys, self.times))


def nearest_rank_quantile(values, level: float) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(level * values.size - 1e-12)), 1)
    return float(values[rank - 1])


def event_quantiles(times, events, levels=QUANTILE_LEVELS) -> EvalHorizons:
    """Nearest-rank quantiles of the uncensored event times."""
    observed = np.asarray(times, dtype=np.float64)[np.asarray(events) > 0]
    if observed.size == 0:
        raise ValueError("event_quantiles: every observation is censored")
    return EvalHorizons(tuple(levels), tuple(nearest_rank_quantile(observed, q) for q in levels))


# -- reports ----------------------------------------------------------------

def _safe(fn, *args):
    try:
        return fn(*args)
    except MetricUnavailable:
        return None


def evaluate_predictions(risk_at, times, events, n_risks: int, horizons: EvalHorizons,
                         grid=None, cumulative: bool = True) -> dict:
    """Per-risk, per-horizon metrics for one fold.

    ``risk_at(t, r)`` returns every patient's predicted risk ``r`` by ``t``.
    Unavailable metrics are ``None``.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    G = censoring_km(times, events)
    out: dict = {"horizons": {}, "cumulative": {}}
    for r in range(1, n_risks + 1):
        per_h = {}
        for key, h in zip(horizons.keys, horizons.times):
            pred = risk_at(h, r)
            per_h[key] = {
                "c_index": _safe(c_index_td, pred, times, events, r, h, G),
                "brier": _safe(brier_td, pred, times, events, r, h, G),
                "auc": _safe(auc_td, pred, times, events, r, h, G),
            }
        out["horizons"][str(r)] = per_h
        if cumulative:
            g = default_grid(times, events) if grid is None else grid
            pred_grid = np.column_stack([risk_at(s, r) for s in g])
            ib, cc = cumulative_metrics(g, pred_grid, times, events, r)
            out["cumulative"][str(r)] = {"integrated_brier": ib, "c_index_td": cc}
    return out


def evaluate_model(model, dataset, horizons: EvalHorizons, cumulative: bool = True) -> dict:
    X = dataset.covariates

    def risk_at(t, r):
        return model.risk(X, t, r)

    return evaluate_predictions(risk_at, dataset.times, dataset.events, model.n_risks,
                                horizons, cumulative=cumulative)


def _leaves(d, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _leaves(v, prefix + (k,))
        else:
            yield prefix + (k,), v


def _set(d, path, value):
    for k in path[:-1]:
        d = d.setdefault(k, {})
    d[path[-1]] = value


@dataclass
class MetricReport:
    horizons: EvalHorizons
    folds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Mean and sample standard deviation over folds, ignoring unavailable values."""
        if not self.folds:
            return {}
        out: dict = {}
        for path, _ in _leaves(self.folds[0]):
            vals = []
            for fold in self.folds:
                node = fold
                for k in path:
                    node = node.get(k) if isinstance(node, dict) else None
                if node is not None:
                    vals.append(node)
            if vals:
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                _set(out, path, {"mean": float(np.mean(vals)), "sd": sd, "n": len(vals)})
            else:
                _set(out, path, None)
        return out

    def to_dict(self) -> dict:
        return {"horizons": self.horizons.to_dict(), "folds": self.folds,
                "summary": self.summary(),
                "metadata": {"c_index_pair_weight": C_INDEX_WEIGHTING, "ipcw_min_g": G_MIN,
                             **self.metadata}}

    def render(self, title: str = "") -> str:
        """Aligned text table: one row per risk, C-index then Brier per horizon."""
        summ = self.summary()
        labels = self.horizons.keys
        head = ["Risk"] + [f"C {q}" for q in labels] + [f"Brier {q}" for q in labels]
        rows = []
        for r, per_h in summ.get("horizons", {}).items():
            cells = [r]
            for metric in ("c_index", "brier"):
                for q in labels:
                    s = per_h.get(q, {}).get(metric)
                    cells.append("-" if s is None else f"{s['mean']:.3f} ({s['sd']:.3f})")
            rows.append(cells)
        widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
        lines = [title] if title else []
        lines.append("  ".join(h.ljust(w) for h, w in zip(head, widths)))
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
        return "\n".join(lines) + "\n"
