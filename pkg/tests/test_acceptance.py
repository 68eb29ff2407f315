"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line with the measured numbers; the
lines are repeated in the pytest terminal summary.  Run on its own with
``pytest tests/test_acceptance.py -v``.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from neuralfg.cli import main
from neuralfg.data import SurvivalDataset, SyntheticSpec, analytic_cif, generate_synthetic
from neuralfg.metrics import (MetricUnavailable, auc_td, brier_td, c_index_td, event_quantiles)
from neuralfg.model import NfgModel
from neuralfg.objectives import SurvivalBatch
from neuralfg.trainer import CvConfig, HyperParams, TrainConfig, cross_validate, train
from neuralfg.verification import (brute_force_metrics, finite_diff_check,
                                   likelihood_cost_benchmark, nll_and_grads, quadrature_cif)

pytestmark = pytest.mark.slow


def record(number, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


# -- criteria 1 to 5, shared with the monofg rerun ---------------------------

def derivative_exactness(variant: str):
    start = time.perf_counter()
    worst_rel = worst_quad = 0.0
    h = 1e-5
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = NfgModel.build(12, 2, layers=2, nodes=50, variant=variant, t_scale=1.0, rng=rng)
        X = rng.normal(size=(10, 12))
        t = rng.uniform(0.05, 3.0, size=10)
        dens = m.cif_derivative(X, t).density
        fd = (m.cif(X, t + h).cif - m.cif(X, t - h).cif) / (2 * h)
        worst_rel = max(worst_rel, float(np.max(np.abs(dens - fd) / np.abs(dens))))
        worst_quad = max(worst_quad, float(np.max(np.abs(quadrature_cif(m, X, t, 64) - m.cif(X, t).cif))))
    elapsed = time.perf_counter() - start
    ok = worst_rel < 1e-5 and worst_quad < 1e-6 and elapsed < 30
    return ok, f"max rel err {worst_rel:.2e} (< 1e-5), quadrature err {worst_quad:.2e} (< 1e-6), {elapsed:.1f}s (< 30s)"


def gradient_exactness(variant: str):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    m = NfgModel.build(12, 2, layers=2, nodes=16, variant=variant, t_scale=2.0, rng=rng)
    batch = SurvivalBatch(rng.normal(size=(8, 12)), rng.exponential(1.0, size=8),
                          np.array([0, 1, 2, 1, 0, 2, 1, 2]))
    fn, params = nll_and_grads(m, batch)
    report = finite_diff_check(fn, params, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = report.passed and elapsed < 60
    return ok, (f"max rel err {report.max_rel_error:.2e} (< 1e-4) over {report.n_checked} "
                f"parameters, {elapsed:.1f}s (< 60s)")


def structural_invariants(variant: str):
    start = time.perf_counter()
    zero_ok, worst_sum, monotone_bad, pairs = True, 0.0, 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = NfgModel.build(12, 2, layers=int(rng.integers(1, 4)), nodes=int(rng.choice([25, 50])),
                           variant=variant, t_scale=float(rng.uniform(0.5, 5.0)), rng=rng)
        X = rng.normal(scale=2.0, size=(100, 12))
        t = rng.exponential(3.0, size=100)
        zero_ok &= bool(np.all(m.cif(X, 0.0).cif == 0.0))
        worst_sum = max(worst_sum, float(np.max(m.cif(X, t).cif.sum(axis=1))))
        t2 = t[:10] + rng.exponential(3.0, size=10)
        monotone_bad += int(np.sum(m.cif(X[:10], t2).cif < m.cif(X[:10], t[:10]).cif))
        pairs += 10
    elapsed = time.perf_counter() - start
    ok = zero_ok and worst_sum <= 1 + 1e-12 and monotone_bad == 0 and elapsed < 30
    return ok, (f"F(0)=0 on 10000 draws: {zero_ok}; max sum F {worst_sum:.15f}; "
                f"{monotone_bad} monotonicity violations in {pairs} pairs; {elapsed:.1f}s (< 30s)")


def _or_none(fn, *args):
    try:
        return fn(*args)
    except MetricUnavailable:
        return None


def metric_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, mismatched = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        t = rng.integers(1, 7, size=n).astype(float)
        d = rng.integers(0, 3, size=n)
        p = rng.choice([0.0, 0.1, 0.3, 0.5, 0.7, 1.0], size=n)
        h = float(rng.choice([1.5, 3.0, 4.0, 6.0]))
        r = int(rng.integers(1, 3))
        got = [_or_none(f, p, t, d, r, h) for f in (c_index_td, brier_td, auc_td)]
        for g, w in zip(got, brute_force_metrics(p, t, d, r, h)):
            if (g is None) != (w is None):
                mismatched += 1
            elif g is not None:
                worst = max(worst, abs(g - w))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and worst <= 1e-12 and elapsed < 60
    return ok, f"max |diff| {worst:.1e} (<= 1e-12), {mismatched} availability mismatches, {elapsed:.1f}s (< 60s)"


# the setting chosen on a separate tuning cohort (seed 1); the check below uses fresh data
RECOVERY_HP = HyperParams(1e-3, 250, 0.0, 1, 25)
RECOVERY_SEED = 20


def synthetic_recovery(variant: str):
    start = time.perf_counter()
    spec = SyntheticSpec(n=10_500, seed=RECOVERY_SEED)
    data = generate_synthetic(spec)
    train_set, test = data.subset(np.arange(10_000)), data.subset(np.arange(10_000, 10_500))
    horizons = event_quantiles(train_set.times, train_set.events)
    model, _ = train(train_set, RECOVERY_HP, TrainConfig(seed=0, variant=variant))
    mae = [float(np.mean([np.abs(model.risk(test.covariates, h, r)
                                 - analytic_cif(spec, test.covariates, h, r)).mean()
                          for h in horizons.times])) for r in (1, 2)]
    q25 = horizons.times[0]
    cidx = [c_index_td(model.risk(test.covariates, q25, r), test.times, test.events, r, q25)
            for r in (1, 2)]
    elapsed = time.perf_counter() - start
    ok = max(mae) < 0.05 and cidx[0] > 0.70 and elapsed < 600
    return ok, (f"MAE risk1 {mae[0]:.4f}, risk2 {mae[1]:.4f} (< 0.05 each); q25 C-index risk1 "
                f"{cidx[0]:.3f} (> 0.70), risk2 {cidx[1]:.3f}; {elapsed:.0f}s (< 600s)")


# -- the criteria ------------------------------------------------------------

def test_criterion_1_derivative_exactness():
    ok, detail = derivative_exactness("nfg")
    assert record(1, ok, detail), detail


def test_criterion_2_gradient_exactness():
    ok, detail = gradient_exactness("nfg")
    assert record(2, ok, detail), detail


def test_criterion_3_structural_invariants():
    ok, detail = structural_invariants("nfg")
    assert record(3, ok, detail), detail


def test_criterion_4_metric_oracle_equivalence():
    ok, detail = metric_oracle_equivalence()
    assert record(4, ok, detail), detail


def test_criterion_5_synthetic_recovery():
    ok, detail = synthetic_recovery("nfg")
    assert record(5, ok, detail), detail


def correlated_spec(n=5000, seed=6) -> SyntheticSpec:
    """Two risks driven by overlapping covariates (features 1-8 and 5-12)."""
    g1, g2 = np.zeros(12), np.zeros(12)
    g1[:8], g2[4:] = 0.3, 0.3
    return SyntheticSpec(n=n, gammas=[g1, g2], seed=seed)


def test_criterion_6_competing_beats_cause_specific():
    start = time.perf_counter()
    spec = correlated_spec()
    data = generate_synthetic(spec)
    cv = CvConfig(k=5, hyperparams=HyperParams(1e-3, 250, 0.0, 1, 25), cumulative=False)
    scores = {}
    for variant in ("nfg", "cause_specific"):
        res = cross_validate(data, TrainConfig(seed=3, variant=variant), cv)
        scores[variant] = np.array([f["horizons"]["1"]["q0.50"]["brier"] for f in res.report.folds])
    wins = int(np.sum(scores["nfg"] <= scores["cause_specific"]))
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and scores["nfg"].mean() <= scores["cause_specific"].mean() and elapsed < 900
    # the same comparison between the two true curves, for context
    h = event_quantiles(data.times, data.events).times[1]
    true_cif = brier_td(analytic_cif(spec, data.covariates, h, 1), data.times, data.events, 1, h)
    true_cs = brier_td(1 - np.exp(-spec.rates(data.covariates)[:, 0] * h), data.times, data.events, 1, h)
    detail = (f"risk-1 Brier at q50, mean nfg {scores['nfg'].mean():.4f} vs cause-specific "
              f"{scores['cause_specific'].mean():.4f}; nfg no worse in {wins}/5 folds (>= 4); "
              f"{elapsed:.0f}s (< 900s); true CIF {true_cif:.4f} vs true 1-exp(-hazard) {true_cs:.4f}")
    assert record(6, ok, detail), detail


def test_criterion_7_quadrature_cost():
    rng = np.random.default_rng(0)
    data = generate_synthetic(SyntheticSpec(n=250, seed=1))
    model = NfgModel.build(12, 2, layers=2, nodes=50, t_scale=data.max_event_time(), rng=rng)
    report = likelihood_cost_benchmark(model, SurvivalBatch.from_dataset(data), (1, 15, 100))
    ratios = [report.ratio(n) for n in (1, 15, 100)]
    ok = ratios[1] >= 3 and ratios[0] <= ratios[1] <= ratios[2]
    detail = "quadrature/exact time ratios n=1: {:.2f}, n=15: {:.2f} (>= 3), n=100: {:.2f} (nondecreasing)".format(*ratios)
    assert record(7, ok, detail), detail


def test_criterion_8_exponential_rate():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n = 2000
    data = SurvivalDataset(rng.normal(size=(n, 1)), rng.exponential(2.0, size=n), np.ones(n, dtype=int))
    model, _ = train(data, HyperParams(1e-3, 100, 0.0, 1, 25), TrainConfig(max_epochs=200, patience=10))
    mle = n / data.times.sum()
    t = float(np.median(data.times))
    fitted = float(np.mean(-np.log(1.0 - model.risk(data.covariates, t, 1)) / t))
    elapsed = time.perf_counter() - start
    ok = abs(fitted - mle) <= 0.05 and elapsed < 120
    detail = f"fitted rate {fitted:.4f} vs MLE {mle:.4f} (within 0.05); {elapsed:.0f}s (< 120s)"
    assert record(8, ok, detail), detail


def test_criterion_9_cv_determinism(tmp_path):
    assert main(["generate", "--n", "400", "--p", "6", "--seed", "2", "--out", str(tmp_path / "g")]) == 0
    cohort = next((tmp_path / "g").iterdir()) / "cohort.csv"
    args = ["cv", "--data", str(cohort), "--k", "3", "--trials", "2", "--max-epochs", "5",
            "--seed", "9", "--out", str(tmp_path / "cv")]
    assert main(args) == 0 and main(args) == 0
    a, b = sorted((tmp_path / "cv").iterdir())
    names = sorted(p.name for p in a.iterdir())
    same = names == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)
    detail = f"{len(names)} result files compared byte for byte: {'identical' if same else 'different'}"
    assert record(9, same, detail), detail


def test_criterion_10_monofg_parity():
    results = [derivative_exactness("monofg"), gradient_exactness("monofg"),
               structural_invariants("monofg"), metric_oracle_equivalence(),
               synthetic_recovery("monofg")]
    ok = all(r[0] for r in results)
    detail = "monofg: " + "; ".join(f"[{i + 1}] {'pass' if r[0] else 'fail'}: {r[1]}"
                                   for i, r in enumerate(results))
    assert record(10, ok, detail), detail


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
