import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from neuralfg.metrics import (EvalHorizons, MetricReport, MetricUnavailable, auc_td, brier_td,
                              c_index_td, censoring_km, cumulative_metrics, event_quantiles,
                              evaluate_predictions, km_fit, nearest_rank_quantile)
from neuralfg.verification import brute_force_cumulative, brute_force_metrics


class TestKaplanMeier:
    def test_hand_example(self):
        km = km_fit([1, 2, 3], [1, 0, 1])
        np.testing.assert_allclose(km([1, 2, 3]), [2 / 3, 2 / 3, 0.0])
        assert km(0.5) == 1.0

    def test_left_limit(self):
        km = km_fit([1, 2, 3], [1, 0, 1])
        np.testing.assert_allclose(km.left([1, 2, 3, 3.5]), [1.0, 2 / 3, 2 / 3, 0.0])

    def test_no_events(self):
        km = km_fit([4.0, 1.0, 2.0], [0, 0, 0])
        assert np.all(km([0, 1, 2, 4, 10]) == 1.0)

    def test_distinct_events_step_down(self):
        n = 6
        km = km_fit(np.arange(1, n + 1), np.ones(n))
        expected = np.cumprod([(n - k) / (n - k + 1) for k in range(1, n + 1)])
        np.testing.assert_allclose(km.survival, expected)

    def test_censoring_fit_flips_indicator(self):
        G = censoring_km([1, 2, 3], [2, 0, 1])
        np.testing.assert_allclose(G([1, 2, 3]), [1.0, 0.5, 0.5])

    def test_errors(self):
        with pytest.raises(ValueError):
            km_fit([], [])
        with pytest.raises(ValueError):
            km_fit([-1.0, 2.0], [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=1, max_size=30))
    def test_curve_invariants(self, obs):
        t, e = zip(*obs)
        km = km_fit(t, e)
        assert np.all(np.diff(km.survival) <= 0)
        assert np.all((km.survival >= 0) & (km.survival <= 1))
        assert km.at_risk[0] == len(obs)


# a 6-patient instance small enough to compute by hand:
# censoring KM drops to 0.8 at t=2 and 0.4 at t=5, horizon 4.5
HAND_T = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
HAND_D = np.array([1, 0, 2, 1, 0, 1])
HAND_P = np.array([0.9, 0.5, 0.3, 0.15, 0.2, 0.1])


class TestHandInstance:
    def test_brier(self):
        # 0.1^2 + 1.25*0.85^2 + 1.25*(0.2^2 + 0.1^2), over 6 patients
        assert brier_td(HAND_P, HAND_T, HAND_D, 1, 4.5) == pytest.approx(0.975625 / 6, abs=1e-14)

    def test_c_index(self):
        # case t=1 wins all 5 pairs (weight 1); case t=4 wins 1 of 2 (weight 1.25^2)
        assert c_index_td(HAND_P, HAND_T, HAND_D, 1, 4.5) == pytest.approx(6.5625 / 8.125, abs=1e-14)

    def test_auc(self):
        assert auc_td(HAND_P, HAND_T, HAND_D, 1, 4.5) == pytest.approx(3.25 / 4.5, abs=1e-14)

    def test_oracle_agrees(self):
        c, b, a = brute_force_metrics(HAND_P, HAND_T, HAND_D, 1, 4.5)
        assert (c, b, a) == pytest.approx((6.5625 / 8.125, 0.975625 / 6, 3.25 / 4.5), abs=1e-14)


class TestCIndex:
    def test_perfect_order(self):
        t = np.arange(1.0, 9.0)
        assert c_index_td(-t, t, np.ones(8, dtype=int), 1, 8.0) == 1.0

    def test_constant_predictions(self):
        t = np.arange(1.0, 9.0)
        assert c_index_td(np.full(8, 0.3), t, np.array([1, 0, 1, 2, 1, 0, 1, 1]), 1, 8.0) == 0.5

    def test_no_pairs(self):
        with pytest.raises(MetricUnavailable):
            c_index_td([0.1, 0.2], [1.0, 2.0], [0, 2], 1, 5.0)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            c_index_td([0.1], [1.0], [1], 1, 0.0)

    def test_five_patients_one_censored(self):
        pred = [0.7, 0.4, 0.6, 0.2, 0.5]
        t, d = [2.0, 1.0, 3.0, 5.0, 4.0], [1, 0, 1, 1, 2]
        assert c_index_td(pred, t, d, 1, 4.0) == pytest.approx(
            brute_force_metrics(pred, t, d, 1, 4.0)[0], abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            c_index_td([0.1, 0.2], [1.0], [1], 1, 1.0)


class TestBrier:
    def test_oracle_indicator_scores_zero(self):
        t = np.arange(1.0, 7.0)
        d = np.array([1, 2, 1, 1, 2, 1])
        pred = ((d == 1) & (t <= 3.5)).astype(float)
        assert brier_td(pred, t, d, 1, 3.5) == 0.0

    def test_zero_prediction_is_case_fraction(self):
        t = np.arange(1.0, 11.0)
        d = np.array([1, 1, 2, 1, 2, 2, 1, 1, 1, 2])
        k = int(np.sum((d == 1) & (t <= 6.0)))
        assert brier_td(np.zeros(10), t, d, 1, 6.0) == pytest.approx(k / 10)

    def test_censoring_reaches_zero_before_horizon(self):
        with pytest.raises(MetricUnavailable):
            brier_td([0.5, 0.5], [1.0, 2.0], [1, 0], 1, 3.0)

    def test_pooled_prediction_no_better_than_indicator(self):
        rng = np.random.default_rng(0)
        t = rng.exponential(size=50)
        d = rng.integers(1, 3, size=50)
        h = float(np.median(t))
        truth = ((d == 1) & (t <= h)).astype(float)
        assert brier_td(np.full(50, truth.mean()), t, d, 1, h) >= brier_td(truth, t, d, 1, h)


class TestAuc:
    def test_perfect_separation(self):
        t = np.arange(1.0, 7.0)
        d = np.ones(6, dtype=int)
        assert auc_td(-t, t, d, 1, 3.0) == 1.0

    def test_constant(self):
        t = np.arange(1.0, 7.0)
        assert auc_td(np.ones(6), t, np.ones(6, dtype=int), 1, 3.0) == 0.5

    def test_needs_cases_and_controls(self):
        with pytest.raises(MetricUnavailable):
            auc_td([0.1, 0.2], [1.0, 2.0], [1, 1], 1, 5.0)
        with pytest.raises(MetricUnavailable):
            auc_td([0.1, 0.2], [1.0, 2.0], [2, 2], 1, 5.0)

    def test_six_patients(self):
        pred = [0.3, 0.3, 0.8, 0.1, 0.5, 0.2]
        t, d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [1, 1, 0, 2, 1, 0]
        assert auc_td(pred, t, d, 1, 2.5) == pytest.approx(
            brute_force_metrics(pred, t, d, 1, 2.5)[2], abs=1e-12)


class TestClipping:
    def test_heavy_censoring_is_unavailable(self):
        # the only event follows forty censored patients, where the censoring curve is 2/42
        t = np.arange(1.0, 43.0)
        d = np.zeros(42, dtype=int)
        d[-2] = 1
        pred = np.linspace(0, 1, 42)
        with pytest.raises(MetricUnavailable):
            c_index_td(pred, t, d, 1, 42.0)
        with pytest.raises(MetricUnavailable):
            auc_td(pred, t, d, 1, 41.5)


class TestCumulative:
    def test_constant_in_time(self):
        """No event falls inside the grid, so every grid point has the same Brier score."""
        t = np.arange(1.0, 7.0)
        d = np.array([1, 2, 1, 2, 2, 2])
        grid = np.array([3.0, 3.5, 3.9])
        b = brier_td(np.full(6, 0.2), t, d, 1, 3.0)
        ib, _ = cumulative_metrics(grid, np.full((6, 3), 0.2), t, d, 1)
        assert ib == pytest.approx(b, abs=1e-15)

    def test_risk_free_cohort(self):
        t = np.arange(1.0, 7.0)
        d = np.array([2, 2, 2, 2, 2, 1])
        grid = np.array([1.0, 2.0, 3.0, 4.0])
        ib, cc = cumulative_metrics(grid, np.zeros((6, 4)), t, d, 1)
        assert ib == 0.0
        assert cc is None  # no risk-1 case inside the grid

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            cumulative_metrics([1.0], np.zeros((2, 1)), [1.0, 2.0], [1, 1], 1)
        with pytest.raises(ValueError):
            cumulative_metrics([2.0, 1.0], np.zeros((2, 2)), [1.0, 2.0], [1, 1], 1)

    def test_six_patient_oracle(self):
        rng = np.random.default_rng(3)
        grid = np.linspace(1.0, 6.0, 6)
        pred = np.cumsum(rng.uniform(0, 0.15, size=(6, 6)), axis=1)
        ib, cc = cumulative_metrics(grid, pred, HAND_T, HAND_D, 1)
        bi, bc = brute_force_cumulative(grid, pred.tolist(), HAND_T, HAND_D, 1)
        assert ib == pytest.approx(bi, abs=1e-12)
        assert cc == pytest.approx(bc, abs=1e-12)


class TestQuantiles:
    def test_uniform_one_to_hundred(self):
        h = event_quantiles(np.arange(1.0, 101.0), np.ones(100, dtype=int))
        assert h.times == (25.0, 50.0, 75.0)

    def test_single_event(self):
        h = event_quantiles([3.0, 7.0, 9.0], [0, 2, 0])
        assert h.times == (7.0, 7.0, 7.0)

    def test_censored_times_are_ignored(self):
        h = event_quantiles([1.0, 100.0, 2.0, 3.0, 4.0], [1, 0, 1, 1, 1])
        assert h.times[-1] == 3.0

    def test_all_censored(self):
        with pytest.raises(ValueError):
            event_quantiles([1.0, 2.0], [0, 0])

    def test_nearest_rank_low_level(self):
        assert nearest_rank_quantile([5.0, 1.0, 3.0], 0.01) == 1.0

    def test_keys(self):
        assert EvalHorizons((0.25, 0.5), (1.0, 2.0)).keys == ["q0.25", "q0.50"]
        assert EvalHorizons.fixed([1.5, 10]).keys == ["t=1.5", "t=10"]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=1, max_size=40))
    def test_nondecreasing(self, ts):
        h = event_quantiles(ts, np.ones(len(ts), dtype=int))
        assert list(h.times) == sorted(h.times)


class TestReport:
    def _fold(self, shift):
        t = np.arange(1.0, 21.0)
        d = np.tile([1, 2, 0, 1], 5)
        horizons = event_quantiles(t, d)
        fold = evaluate_predictions(lambda h, r: np.exp(-t / (h + shift)), t, d, 2, horizons)
        return horizons, fold

    def test_summary_mean_and_sample_sd(self):
        h, a = self._fold(0.0)
        _, b = self._fold(5.0)
        report = MetricReport(h, [a, b])
        s = report.summary()["horizons"]["1"]["q0.50"]["brier"]
        vals = [a["horizons"]["1"]["q0.50"]["brier"], b["horizons"]["1"]["q0.50"]["brier"]]
        assert s["mean"] == pytest.approx(np.mean(vals))
        assert s["sd"] == pytest.approx(np.std(vals, ddof=1))

    def test_render_and_metadata(self):
        h, a = self._fold(0.0)
        report = MetricReport(h, [a])
        text = report.render("demo")
        assert text.startswith("demo\n") and "C q0.25" in text and "Brier q0.75" in text
        assert report.to_dict()["metadata"]["c_index_pair_weight"] == "w(t_i)^2"

    def test_values_in_unit_interval(self):
        _, a = self._fold(0.0)
        for per_h in a["horizons"].values():
            for m in per_h.values():
                for v in m.values():
                    assert v is None or 0.0 <= v <= 1.0


# -- randomized equivalence with the enumeration oracles ---------------------

cohorts = st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 6), min_size=n, max_size=n),
    st.lists(st.integers(0, 2), min_size=n, max_size=n),
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.6, 0.9, 1.0]), min_size=n, max_size=n),
))


def _or_none(fn, *args):
    try:
        return fn(*args)
    except MetricUnavailable:
        return None


@settings(max_examples=300, deadline=None)
@given(cohorts, st.sampled_from([1.0, 2.5, 3.0, 4.5, 6.0]), st.sampled_from([1, 2]))
def test_matches_brute_force(cohort, horizon, risk):
    t, d, p = (np.asarray(v, dtype=float) for v in cohort)
    d = d.astype(int)
    got = (_or_none(c_index_td, p, t, d, risk, horizon),
           _or_none(brier_td, p, t, d, risk, horizon),
           _or_none(auc_td, p, t, d, risk, horizon))
    want = brute_force_metrics(p, t, d, risk, horizon)
    for g, w in zip(got, want):
        assert (g is None) == (w is None)
        if g is not None:
            assert abs(g - w) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(cohorts)
def test_increasing_transform_invariance(cohort):
    t, d, p = (np.asarray(v, dtype=float) for v in cohort)
    d = d.astype(int)
    base = (_or_none(c_index_td, p, t, d, 1, 6.0), _or_none(auc_td, p, t, d, 1, 3.0))
    moved = (_or_none(c_index_td, np.exp(3 * p) - 7, t, d, 1, 6.0),
             _or_none(auc_td, np.exp(3 * p) - 7, t, d, 1, 3.0))
    assert base == moved


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 30), min_size=n, max_size=n, unique=True),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.permutations(list(range(n))))))
def test_negation_sums_to_one(cohort):
    t, d, p = (np.asarray(v, dtype=float) for v in cohort)
    c = _or_none(c_index_td, p, t, d.astype(int), 1, 30.0)
    assume(c is not None)
    assert c + c_index_td(-p, t, d.astype(int), 1, 30.0) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(cohorts)
def test_uncensored_equals_unweighted_concordance(cohort):
    t, d, p = (np.asarray(v, dtype=float) for v in cohort)
    d = np.where(d.astype(int) == 0, 1, d.astype(int))
    num = den = 0.0
    for i in range(t.size):
        if d[i] != 1:
            continue
        for j in range(t.size):
            if t[i] < t[j]:
                den += 1
                num += 1.0 if p[i] > p[j] else 0.5 if p[i] == p[j] else 0.0
    c = _or_none(c_index_td, p, t, d, 1, 6.0)
    if den == 0:
        assert c is None
    else:
        assert c == num / den
