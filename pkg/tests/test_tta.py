import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confreg.conformal import NORMALIZED, ConformalCalibrator, fit_calibrator
from confreg.core import AugmentedPredictionBundle as Bundle
from confreg.core import PredictionRecord, ValidationError
from confreg.conformal import nonconformity_scores
from confreg.tta import (
    MULTI_SAMPLE,
    TRADITIONAL,
    TtaStrategy,
    aggregate_point,
    calibrate,
    calibrate_multi_sample,
    calibrate_traditional,
    multi_sample_scores,
    predict_with_strategy,
    traditional_scores,
)


def random_bundles(rng, n, k):
    y = rng.normal(0.85, 0.15, n)
    preds = y[:, None] + rng.normal(0, 0.1, (n, 1)) + rng.normal(0, 0.03, (n, k))
    return [Bundle(f"b{i}", float(y[i]), tuple(map(float, preds[i]))) for i in range(n)]


class TestAggregate:
    def test_single(self):
        assert aggregate_point(Bundle("a", 1.0, (0.8,))) == 0.8

    def test_pair(self):
        assert aggregate_point(Bundle("a", 1.0, (0.7, 0.9))) == pytest.approx(0.8, abs=1e-15)

    def test_four(self):
        assert aggregate_point(Bundle("a", 1.0, (0.6, 0.8, 1.0, 0.8))) == pytest.approx(0.8, abs=1e-15)


class TestTraditional:
    def test_symmetric_jitter_cancels(self):
        cal = calibrate_traditional([Bundle("a", 1.0, (0.9, 1.1))], 0.5)
        assert traditional_scores([Bundle("a", 1.0, (0.9, 1.1))])[0] == pytest.approx(0.0, abs=1e-15)
        assert cal.n_calib == 1

    def test_reduces_to_fit_calibrator(self):
        bundles = [Bundle(str(i), 0.0, (0.1 * i - 0.05, 0.1 * i + 0.05)) for i in range(1, 10)]
        cal = calibrate_traditional(bundles, 0.1)
        assert cal.q_radius == pytest.approx(0.9, abs=1e-12)

    def test_k1_equals_plain_cp(self):
        rng = np.random.default_rng(1)
        bundles = random_bundles(rng, 60, 1)
        recs = [PredictionRecord(b.id, b.y_true, b.aug_preds[0]) for b in bundles]
        for alpha in (0.1, 0.05, 0.01):
            assert calibrate_traditional(bundles, alpha) == fit_calibrator(nonconformity_scores(recs), alpha)

    def test_inconsistent_k(self):
        with pytest.raises(ValidationError):
            calibrate_traditional([Bundle("a", 1, (1, 2)), Bundle("b", 1, (1,))], 0.1)

    def test_empty(self):
        with pytest.raises(ValidationError):
            calibrate_traditional([], 0.1)


class TestMultiSample:
    def test_flattening(self):
        bundles = [Bundle("a", 1.0, (0.9, 1.3)), Bundle("b", 2.0, (1.8, 2.4))]
        assert sorted(multi_sample_scores(bundles).round(12)) == [0.1, 0.2, 0.3, 0.4]
        assert calibrate_multi_sample(bundles, 0.5).n_calib == 4

    def test_matches_double_loop(self):
        rng = np.random.default_rng(7)
        bundles = random_bundles(rng, 40, 5)
        expected = []
        for b in bundles:
            for p in b.aug_preds:
                expected.append(abs(b.y_true - p))
        np.testing.assert_array_equal(multi_sample_scores(bundles), expected)

    def test_k1_identical_to_traditional(self):
        bundles = random_bundles(np.random.default_rng(3), 80, 1)
        for alpha in (0.1, 0.05, 0.01):
            assert calibrate_multi_sample(bundles, alpha) == calibrate_traditional(bundles, alpha)

    def test_exact_predictions(self):
        bundles = [Bundle(str(i), 0.5, (0.5, 0.5, 0.5)) for i in range(50)]
        assert calibrate_multi_sample(bundles, 0.05).q_radius == 0.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), k=st.integers(1, 6))
    def test_permutation_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        bundles = random_bundles(rng, 30, k)
        shuffled = [Bundle(b.id, b.y_true, tuple(rng.permutation(b.aug_preds))) for b in bundles]
        for fit in (calibrate_traditional, calibrate_multi_sample):
            a, b = fit(bundles, 0.1), fit(shuffled, 0.1)
            assert a.q_radius == pytest.approx(b.q_radius, abs=1e-15)
        assert sorted(multi_sample_scores(bundles)) == sorted(multi_sample_scores(shuffled))


class TestPredict:
    def test_multi_sample_paper_radius(self):
        strat = TtaStrategy(MULTI_SAMPLE, 2)
        iv = predict_with_strategy(ConformalCalibrator(0.05, 0.2597, 20), strat, Bundle("a", 0.8, (0.7, 0.8)))
        assert iv.center == 0.75
        assert (iv.lower, iv.upper) == (0.4903, 1.0097)

    def test_single_prediction_paper_radius(self):
        strat = TtaStrategy(TRADITIONAL, 1)
        iv = predict_with_strategy(ConformalCalibrator(0.05, 0.2786, 20), strat, Bundle("a", 0.8, (0.75,)))
        assert iv.radius == pytest.approx(0.2786, abs=1e-15)
        assert iv.center == 0.75

    @pytest.mark.parametrize("kind", [TRADITIONAL, MULTI_SAMPLE])
    def test_zero_radius(self, kind):
        iv = predict_with_strategy(ConformalCalibrator(0.1, 0.0, 5), TtaStrategy(kind, 2), Bundle("a", 1, (1, 2)))
        assert iv.lower == iv.upper == 1.5

    def test_k_mismatch(self):
        with pytest.raises(ValidationError):
            predict_with_strategy(ConformalCalibrator(0.1, 0.2, 5), TtaStrategy(TRADITIONAL, 3), Bundle("a", 1, (1,)))

    def test_calibrate_checks_strategy_k(self):
        with pytest.raises(ValidationError):
            calibrate(TtaStrategy(TRADITIONAL, 3), [Bundle("a", 1, (1, 2))], 0.1)

    def test_normalized_scales_by_spread(self):
        bundles = random_bundles(np.random.default_rng(11), 100, 4)
        strat = TtaStrategy(TRADITIONAL, 4)
        cal = calibrate(strat, bundles, 0.1, score_kind=NORMALIZED)
        b = bundles[0]
        iv = predict_with_strategy(cal, strat, b)
        assert iv.radius == pytest.approx(cal.q_radius * np.std(b.aug_preds, ddof=1))

    def test_normalized_needs_two_augmentations(self):
        with pytest.raises(ValidationError):
            calibrate(TtaStrategy(TRADITIONAL, 1), [Bundle("a", 1, (1,))], 0.1, score_kind=NORMALIZED)

    def test_exchangeability_flag(self):
        assert TtaStrategy(MULTI_SAMPLE, 4).exchangeability == "heuristic"
        assert TtaStrategy(MULTI_SAMPLE, 1).exchangeability == "exact"
        assert TtaStrategy(TRADITIONAL, 4).exchangeability == "exact"
