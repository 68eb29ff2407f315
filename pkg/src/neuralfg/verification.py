"""Independent oracles and the exact-vs-quadrature likelihood benchmark.

Nothing here reuses the metric code in :mod:`neuralfg.metrics`; the
brute-force metrics are plain loops over patients and pairs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tape
from .model import NfgModel
from .objectives import LOG_FLOOR, LossBreakdown, SurvivalBatch, competing_nll


# -- Gauss-Legendre ----------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss_legendre_cached(n: int):
    if n < 1:
        raise ValueError("quadrature degree must be >= 1")
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    dp = np.ones(n)
    for _ in range(100):
        p0, p1 = np.ones(n), x.copy()
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        # P_n'(x) from P_n and P_{n-1}
        dp = n * (x * p1 - p0) / (x * x - 1.0) if n > 1 else np.ones(n)
        step = p1 / dp
        x = x - step
        if np.max(np.abs(step)) < 1e-16:
            break
    p0, p1 = np.ones(n), x.copy()
    for j in range(2, n + 1):
        p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
    dp = n * (x * p1 - p0) / (x * x - 1.0) if n > 1 else np.ones(n)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``n``-point rule on ``[-1, 1]`` (Newton on P_n)."""
    x, w = _gauss_legendre_cached(int(n))
    return x.copy(), w.copy()


@dataclass
class QuadratureRule:
    degree: int
    nodes: np.ndarray
    weights: np.ndarray


def quadrature_rule(n: int, upper: float) -> QuadratureRule:
    """Rule mapped to ``[0, upper]``."""
    x, w = gauss_legendre(n)
    half = 0.5 * upper
    return QuadratureRule(n, half * (x + 1.0), half * w)


def _stacked_nodes(t: np.ndarray, n: int):
    x, w = gauss_legendre(n)
    half = 0.5 * t[:, None]
    return half * (x[None, :] + 1.0), half * w[None, :]


def quadrature_cif(model: NfgModel, x, t, n: int) -> np.ndarray:
    """``int_0^t dF_r/du du`` by the ``n``-point rule over the model's own density."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (X.shape[0],))
    nodes, weights = _stacked_nodes(t, n)
    dens = model.cif_derivative(np.repeat(X, n, axis=0), nodes.reshape(-1)).density
    dens = dens.reshape(X.shape[0], n, -1)
    out = np.einsum("ij,ijr->ir", weights, dens)
    return out[0] if np.ndim(x) == 1 else out


# -- finite differences -----------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst: tuple
    passed: bool
    n_checked: int


def finite_diff_check(fn, params: list[np.ndarray], tolerance: float = 1e-4, h: float = 1e-5,
                      atol: float = 1e-7, grads: list[np.ndarray] | None = None) -> FiniteDiffReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``fn()`` evaluates the loss at the current contents of ``params`` and returns
    ``(loss, grads)``.  The per-coordinate error is
    ``|g - fd| / (max(|g|, |fd|) + atol / tolerance)``, so a coordinate passes
    exactly when ``|g - fd| <= tolerance * max(|g|, |fd|) + atol``.
    """
    if grads is None:
        _, grads = fn()
    grads = [np.array(g, dtype=np.float64) for g in grads]
    worst, worst_at, count = 0.0, (), 0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn()[0]
            flat[j] = orig - h
            down = fn()[0]
            flat[j] = orig
            fd = (up - down) / (2 * h)
            g = grads[pi].reshape(-1)[j]
            err = abs(g - fd) / (max(abs(g), abs(fd)) + atol / tolerance)
            count += 1
            if err > worst:
                worst, worst_at = err, (pi, j, float(g), float(fd))
    return FiniteDiffReport(worst, worst_at, worst <= tolerance, count)


def nll_and_grads(model: NfgModel, batch: SurvivalBatch, objective=competing_nll):
    """Closure for :func:`finite_diff_check` over all model parameters."""
    params = model.parameters()

    def fn():
        tape = Tape()
        loss = objective(tape, model, batch)
        g = tape.backward(loss.total)
        return loss.total_nll, [g.wrt(p) for p in params]

    return fn, params


# -- brute-force metrics ----------------------------------------------------

def _km_loop(times, indicator):
    """Product-limit curve as a list of (time, survival) steps."""
    steps, s = [], 1.0
    for u in sorted(set(times)):
        at_risk = sum(1 for ti in times if ti >= u)
        d = sum(1 for ti, e in zip(times, indicator) if ti == u and e)
        s *= 1.0 - d / at_risk
        steps.append((u, s))
    return steps


def _g_before(steps, u):
    s = 1.0
    for time_, val in steps:
        if time_ < u:
            s = val
    return s


def _weight(steps, u, g_min=0.05):
    g = _g_before(steps, u)
    return 1.0 / max(g, g_min), g < g_min


def _score(a, b):
    return 1.0 if a > b else 0.5 if a == b else 0.0


def brute_force_metrics(pred, times, events, risk: int, horizon: float,
                        g_min: float = 0.05, clip_limit: float = 0.05):
    """(c_index, brier, auc) by direct enumeration; ``None`` marks unavailable."""
    pred = [float(v) for v in pred]
    times = [float(v) for v in times]
    events = [int(v) for v in events]
    n = len(times)
    if n > 12:
        raise ValueError("brute_force_metrics is meant for cohorts of at most 12 patients")
    G = _km_loop(times, [e == 0 for e in events])

    # C-index
    num = den = clipped_mass = 0.0
    for i in range(n):
        if events[i] != risk or times[i] > horizon:
            continue
        w, c = _weight(G, times[i], g_min)
        for j in range(n):
            if times[i] < times[j]:
                num += w * w * _score(pred[i], pred[j])
                den += w * w
                if c:
                    clipped_mass += w * w
    c_index = None if den == 0 or clipped_mass > clip_limit * den else num / den

    # Brier
    brier = None
    if _g_before(G, horizon) > 0.0:
        total = mass = clipped_mass = 0.0
        w_h, c_h = _weight(G, horizon, g_min)
        for i in range(n):
            if events[i] == risk and times[i] <= horizon:
                w, c = _weight(G, times[i], g_min)
                total += w * (1.0 - pred[i]) ** 2
            elif times[i] > horizon:
                w, c = w_h, c_h
                total += w * pred[i] ** 2
            else:
                continue
            mass += w
            if c:
                clipped_mass += w
        if not (mass > 0 and clipped_mass > clip_limit * mass):
            brier = total / n

    # AUC
    auc = None
    cases = [i for i in range(n) if events[i] == risk and times[i] <= horizon]
    controls = [j for j in range(n) if times[j] > horizon]
    if cases and controls and not _weight(G, horizon, g_min)[1]:
        num = den = mass = clipped_mass = 0.0
        for i in cases:
            w, c = _weight(G, times[i], g_min)
            mass += w
            if c:
                clipped_mass += w
            for j in controls:
                num += w * _score(pred[i], pred[j])
                den += w
        if not clipped_mass > clip_limit * mass:
            auc = num / den
    return c_index, brier, auc


def brute_force_cumulative(grid, pred_grid, times, events, risk: int, g_min: float = 0.05,
                           clip_limit: float = 0.05):
    """(integrated Brier, overall C-index) by enumeration, mirroring the grid rules."""
    grid = [float(g) for g in grid]
    scores = []
    for k, g in enumerate(grid):
        b = brute_force_metrics([row[k] for row in pred_grid], times, events, risk, g,
                                g_min, clip_limit)[1]
        if b is None:
            return None, None
        scores.append(b)
    area = sum(0.5 * (scores[k] + scores[k + 1]) * (grid[k + 1] - grid[k])
               for k in range(len(grid) - 1))
    integrated = area / (grid[-1] - grid[0])

    G = _km_loop(list(times), [int(e) == 0 for e in events])
    n = len(times)
    num = den = clipped_mass = 0.0
    for i in range(n):
        if int(events[i]) != risk or times[i] > grid[-1]:
            continue
        col = next((k for k, g in enumerate(grid) if g >= times[i]), len(grid) - 1)
        w, c = _weight(G, times[i], g_min)
        for j in range(n):
            if times[i] < times[j]:
                num += w * w * _score(pred_grid[i][col], pred_grid[j][col])
                den += w * w
                if c:
                    clipped_mass += w * w
    overall = None if den == 0 or clipped_mass > clip_limit * den else num / den
    return integrated, overall


# -- likelihood cost benchmark ---------------------------------------------

def quadrature_nll(tape: Tape, model: NfgModel, batch: SurvivalBatch, n: int) -> LossBreakdown:
    """Competing-risks NLL whose censored terms integrate the density with ``n`` points.

    Mirrors the cost profile of integration-based models on the same
    architecture: each censored patient needs ``n`` density evaluations,
    each event patient one.
    """
    events = np.asarray(batch.events)
    ev_rows = np.flatnonzero(events > 0)
    cen_rows = np.flatnonzero(events == 0)
    nodes, weights = _stacked_nodes(np.asarray(batch.times, dtype=np.float64)[cen_rows], n)
    X = np.concatenate([batch.covariates[ev_rows], np.repeat(batch.covariates[cen_rows], n, axis=0)])
    t = np.concatenate([batch.times[ev_rows], nodes.reshape(-1)])
    out = model.forward(tape, X, t)
    density = tape.tangent_of(out.cif)
    n_ev = ev_rows.size

    floored = 0
    if n_ev:
        d = tape.index(density, (np.arange(n_ev), events[ev_rows] - 1))
        floored += int(np.sum(d.value < LOG_FLOOR))
        event_term = -tape.clamp_min(d, LOG_FLOOR).log().sum()
    else:
        event_term = tape.constant(0.0)
    if cen_rows.size:
        dens_c = tape.index(density, slice(n_ev, None)).sum(axis=1)
        w = tape.constant(weights.reshape(-1))
        cif_total = tape.reshape(dens_c * w, (cen_rows.size, n)).sum(axis=1)
        surv = 1.0 - cif_total
        floored += int(np.sum(surv.value < LOG_FLOOR))
        censor_term = -tape.clamp_min(surv, LOG_FLOOR).log().sum()
    else:
        censor_term = tape.constant(0.0)
    return LossBreakdown(event_term + censor_term, event_term, censor_term, n_ev, cen_rows.size, floored)


@dataclass
class BenchRow:
    method: str
    degree: int | None
    seconds_per_eval: float
    evaluations: int
    ratio: float = 1.0
    iterations: int | None = None


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    batch_size: int = 0
    architecture: dict = field(default_factory=dict)

    def ratio(self, degree: int) -> float:
        return next(r.ratio for r in self.rows if r.degree == degree)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "architecture": self.architecture,
                "rows": [vars(r) for r in self.rows]}

    def render(self) -> str:
        head = ["Method", "Time / eval (ms)", "Ratio vs exact", "Evaluations", "Iterations"]
        body = [[r.method, f"{1e3 * r.seconds_per_eval:.3f}", f"{r.ratio:.2f}", str(r.evaluations),
                 "-" if r.iterations is None else str(r.iterations)] for r in self.rows]
        widths = [max(len(c) for c in col) for col in zip(head, *body)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines) + "\n"


def _time_eval(fn, min_samples: int, min_seconds: float) -> tuple[float, int]:
    """Median seconds per call; repetitions per sample grow until the clock resolves them."""
    resolution = time.get_clock_info("perf_counter").resolution
    reps = 1
    while True:
        start = time.perf_counter()
        for _ in range(reps):
            fn()
        if time.perf_counter() - start > 1000 * resolution:
            break
        reps *= 2
    samples = []
    begin = time.perf_counter()
    while len(samples) < min_samples or time.perf_counter() - begin < min_seconds:
        start = time.perf_counter()
        for _ in range(reps):
            fn()
        samples.append((time.perf_counter() - start) / reps)
    return float(np.median(samples)), len(samples) * reps


def likelihood_cost_benchmark(model: NfgModel, batch: SurvivalBatch, degrees=(1, 15, 100),
                              min_samples: int = 50, min_seconds: float = 0.0) -> BenchReport:
    """Wall time of one likelihood + gradient evaluation, exact vs ``n``-point quadrature."""
    if len(batch) == 0:
        raise ValueError("benchmark batch is empty")
    tape = Tape()

    def run(objective):
        def fn():
            tape.reset()
            loss = objective(tape, model, batch)
            tape.backward(loss.total)
        return fn

    with threadpool_limits(limits=1):
        exact, n_exact = _time_eval(run(competing_nll), min_samples, min_seconds)
        rows = [BenchRow("exact", None, exact, n_exact)]
        for n in degrees:
            sec, count = _time_eval(run(lambda tp, m, b, n=n: quadrature_nll(tp, m, b, n)),
                                    min_samples, min_seconds)
            rows.append(BenchRow(f"quadrature-{n}", int(n), sec, count, sec / exact))
    arch = {"layers": model.embedding.spec.depth,
            "nodes": model.embedding.spec.widths[-1], "variant": model.variant,
            "n_risks": model.n_risks, "n_parameters": model.n_parameters()}
    return BenchReport(rows, len(batch), arch)
