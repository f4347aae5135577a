import json
import random
from datetime import date

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alertiger.detector import DetectorBundle, ForecastModel, ModelConfig
from alertiger.evalkit import (
    chop_intervals,
    compute_prf,
    config_fingerprint,
    evaluate,
    match_intervals,
    prepared_windows,
    rolling_detect,
    score_decisions,
    timing_harness,
    write_results,
)
from alertiger.postprocess import DecisionRecord, FilterConfig
from alertiger.series import LabeledSeries, LabelInterval, SeriesKey, UnivariateSeries

D0 = date(2024, 1, 1)


def bundle(seed=0):
    return DetectorBundle([ForecastModel.initialize(ModelConfig(horizon=h), seed=seed + h) for h in (14, 28)])


def labeled(name, values, labels=()):
    key = SeriesKey(name, "f", "mean")
    s = UnivariateSeries(key, D0, np.asarray(values, dtype=float))
    return LabeledSeries(s, [LabelInterval(key, s.date_at(a), s.date_at(b)) for a, b in labels])


def brute_force(predicted, labeled_):
    """Enumerate every overlapping (prediction, label) pair."""
    pairs = {(i, j) for i, (ps, pe) in enumerate(predicted) for j, (ls, le) in enumerate(labeled_)
             if ps <= le and ls <= pe}
    hit_labels = {j for _, j in pairs}
    hit_preds = {i for i, _ in pairs}
    return len(hit_labels), len(predicted) - len(hit_preds), len(labeled_) - len(hit_labels)


def random_intervals(rng, k):
    out = []
    for _ in range(k):
        s = rng.randint(0, 60)
        out.append((s, s + rng.randint(0, 6)))
    return out


class TestChop:
    @pytest.mark.parametrize("interval,expected", [
        ((1, 17), [(1, 7), (8, 14), (15, 17)]),
        ((1, 7), [(1, 7)]),
        ((1, 8), [(1, 7), (8, 8)]),
        ((3, 3), [(3, 3)]),
    ])
    def test_examples(self, interval, expected):
        assert chop_intervals([interval]) == expected

    @given(st.lists(st.tuples(st.integers(0, 100), st.integers(0, 40)), max_size=6))
    def test_coverage(self, specs):
        intervals = [(s, s + n) for s, n in specs]
        chopped = chop_intervals(intervals)
        assert all(e - s + 1 <= 7 for s, e in chopped)
        before = [d for s, e in intervals for d in range(s, e + 1)]
        after = [d for s, e in chopped for d in range(s, e + 1)]
        assert sorted(before) == sorted(after)


class TestMatch:
    def test_quoted_example(self):
        assert match_intervals([(11, 12)], [(10, 12)]) == (1, 0, 0)

    def test_missed(self):
        assert match_intervals([], [(10, 12)]) == (0, 0, 1)

    def test_false_alarm(self):
        assert match_intervals([(20, 21)], []) == (0, 1, 0)

    def test_one_prediction_two_labels(self):
        assert match_intervals([(3, 8)], [(2, 3), (8, 9)]) == (2, 0, 0)

    def test_brute_force_oracle(self):
        for seed in range(100):
            rng = random.Random(seed)
            pred = random_intervals(rng, rng.randint(0, 10))
            labs = random_intervals(rng, rng.randint(0, 10))
            assert match_intervals(pred, labs) == brute_force(pred, labs), seed


class TestPRF:
    def test_examples(self):
        r = compute_prf(9, 1, 0)
        assert (r.precision, r.recall) == (0.9, 1.0)
        assert r.f1 == pytest.approx(0.947368, abs=1e-6)
        r = compute_prf(0, 0, 0)
        assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
        r = compute_prf(1, 1, 1)
        assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)

    def test_negative(self):
        with pytest.raises(ValueError):
            compute_prf(-1, 0, 0)

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_bounds(self, tp, fp, fn):
        r = compute_prf(tp, fp, fn)
        assert 0 <= r.f1 <= 1
        assert r.f1 <= max(r.precision, r.recall) + 1e-12


class TestRollingDetect:
    def test_horizon_switch(self):
        rng = np.random.default_rng(0)
        data = [labeled("s", 10 + rng.normal(size=42))]
        recs = rolling_detect(data, bundle())
        assert [r.date for r in recs] == [D0.fromordinal(D0.toordinal() + i) for i in range(14, 42)]

    def test_missing_day_everywhere(self):
        values = np.ones(42)
        values[::7] = np.nan
        assert rolling_detect([labeled("s", values)], bundle()) == []

    def test_forecast_only_uses_band(self):
        rng = np.random.default_rng(1)
        data = [labeled("s", 10 + rng.normal(size=50))]
        recs = rolling_detect(data, bundle(), use_classifier=False)
        assert all(r.is_anomaly == r.out_of_boundary for r in recs)

    def test_workers_match_single(self):
        rng = np.random.default_rng(2)
        data = [labeled(f"s{i}", 10 + rng.normal(size=45)) for i in range(40)]
        assert rolling_detect(data, bundle(), workers=3) == rolling_detect(data, bundle())

    def test_order_independent(self):
        rng = np.random.default_rng(3)
        data = [labeled(f"s{i}", 10 + rng.normal(size=45), [(30, 32)]) for i in range(5)]
        a = evaluate(data, bundle())
        b = evaluate(list(reversed(data)), bundle())
        assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn)


class TestScoring:
    def test_counts(self):
        data = [labeled("a", np.zeros(30), [(20, 22)]), labeled("b", np.zeros(30), [(5, 5)])]
        ka, kb = data[0].key, data[1].key
        recs = [DecisionRecord(ka, data[0].series.date_at(d), True, 2.0) for d in (21, 22, 27)]
        r = score_decisions(data, recs)
        assert (r.tp, r.fp, r.fn) == (1, 1, 1)

    def test_filters_never_raise_recall(self):
        data = [labeled("a", np.zeros(30), [(20, 22), (10, 10)])]
        k = data[0].key
        recs = [DecisionRecord(k, data[0].series.date_at(d), True, s) for d, s in ((10, 3.0), (20, 1.0), (21, 1.0))]
        off = score_decisions(data, recs)
        on = score_decisions(data, recs, FilterConfig())
        assert on.recall <= off.recall
        assert (off.tp, on.tp) == (2, 0)

    def test_unknown_series_counts_as_false_alarm(self):
        data = [labeled("a", np.zeros(30))]
        ghost = DecisionRecord(SeriesKey("ghost", "f", "mean"), D0, True, 2.0)
        assert score_decisions(data, [ghost]).fp == 1

    def test_results_file(self, tmp_path):
        r = compute_prf(1, 2, 3)
        write_results(r, tmp_path / "r.json", workers=1)
        d = json.loads((tmp_path / "r.json").read_text())
        assert d["tp"] == 1 and d["workers"] == 1

    def test_fingerprint_stable(self):
        assert config_fingerprint(a=1, b="x") == config_fingerprint(b="x", a=1)
        assert config_fingerprint(a=1) != config_fingerprint(a=2)


class TestTiming:
    def test_empty(self):
        times = timing_harness(bundle(), [], worker_counts=(1,))
        assert times[1] < 0.1

    def test_runs(self):
        rng = np.random.default_rng(4)
        data = [labeled(f"s{i}", 10 + rng.normal(size=60)) for i in range(4)]
        windows = prepared_windows(data, bundle())
        assert len(windows) == 4 * 46
        times = timing_harness(bundle(), windows, worker_counts=(1, 2))
        assert set(times) == {1, 2} and all(t > 0 for t in times.values())
