import numpy as np
import pytest

from ffclab.errors import DegenerateGroupError, InvalidArgumentError
from ffclab.fairness import (
    FairnessReport,
    PredictionSet,
    accuracy_parity,
    balanced_accuracy,
    demographic_parity,
    equalized_odds,
    equalized_odds_gaps,
    evaluate,
    fairness_delta,
)
from ffclab.numkit import Rng
from oracles import (
    bf_accuracy_parity,
    bf_balanced_accuracy,
    bf_demographic_parity,
    bf_equalized_odds,
)


def make_preds(y_true, y_pred, attrs, scores=None):
    y_true = np.asarray(y_true)
    if scores is None:
        scores = np.full(len(y_true), 0.5)
    return PredictionSet(y_true=y_true, y_pred=np.asarray(y_pred), y_score=scores, attributes=attrs)


def random_preds(rng: Rng, n: int, k: int) -> PredictionSet:
    while True:
        y_true = rng.bernoulli(0.5, n)
        y_pred = rng.bernoulli(0.5, n)
        attrs = {f"a{i+1}": rng.bernoulli(0.5, n) for i in range(k)}
        ok = all(
            ((a == g) & (y_true == y)).any()
            for a in attrs.values()
            for g in (0, 1)
            for y in (0, 1)
        )
        if ok:
            return PredictionSet(
                y_true=y_true, y_pred=y_pred, y_score=rng.uniform(size=n), attributes=attrs
            )


class TestDemographicParity:
    def test_all_positive_is_zero(self):
        p = make_preds([0, 1, 0, 1], [1, 1, 1, 1], {"a1": [0, 0, 1, 1]})
        assert demographic_parity(p, "a1") == 0.0

    def test_direct_count(self):
        p = make_preds(
            [0] * 8,
            [1, 1, 0, 0, 1, 0, 0, 0],
            {"a1": [0, 0, 0, 0, 1, 1, 1, 1]},
        )
        assert abs(demographic_parity(p, "a1") - 0.25) < 1e-15

    def test_identical_multisets(self):
        p = make_preds([0] * 6, [1, 0, 0, 1, 0, 0], {"a1": [0, 0, 0, 1, 1, 1]})
        assert demographic_parity(p, "a1") == 0.0

    def test_empty_group_raises(self):
        p = make_preds([0, 1], [0, 1], {"a1": [0, 0]})
        with pytest.raises(DegenerateGroupError):
            demographic_parity(p, "a1")


class TestEqualizedOdds:
    def test_perfect_predictor(self):
        y = [0, 1, 0, 1, 0, 1, 0, 1]
        p = make_preds(y, y, {"a1": [0, 0, 1, 1, 0, 0, 1, 1]})
        assert equalized_odds(p, "a1") == 0.0

    def test_direct_count(self):
        # y=1 rows: group0 preds (1,1), group1 preds (1,0); y=0 rows all 0
        y_true = [1, 1, 1, 1, 0, 0, 0, 0]
        y_pred = [1, 1, 1, 0, 0, 0, 0, 0]
        attr = [0, 0, 1, 1, 0, 0, 1, 1]
        p = make_preds(y_true, y_pred, {"a1": attr})
        assert abs(equalized_odds(p, "a1") - 0.5) < 1e-15
        gaps = equalized_odds_gaps(p, "a1")
        assert gaps[0] == 0.0 and abs(gaps[1] - 0.5) < 1e-15

    def test_empty_cell_raises(self):
        p = make_preds([1, 1, 0, 0], [1, 0, 1, 0], {"a1": [0, 0, 1, 1]})
        with pytest.raises(DegenerateGroupError):
            equalized_odds(p, "a1")


class TestBalancedAccuracy:
    def test_perfect(self):
        y = [0, 1, 1, 0]
        p = make_preds(y, y, {"a1": [0, 0, 1, 1]})
        assert balanced_accuracy(p) == 1.0

    def test_constant_predictor_half(self):
        y_true = [1, 0, 1, 0]
        p = make_preds(y_true, [1, 1, 1, 1], {"a1": [0, 0, 1, 1]})
        assert balanced_accuracy(p) == 0.5

    def test_group_means(self):
        # group0 accuracy 0.8 (4/5), group1 accuracy 0.6 (3/5)
        y_true = [1, 1, 1, 1, 0, 1, 1, 1, 0, 0]
        y_pred = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1]
        attr = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
        p = make_preds(y_true, y_pred, {"a1": attr})
        assert abs(balanced_accuracy(p) - 0.7) < 1e-15


class TestAccuracyParity:
    def test_uniform_predictions_zero(self):
        p = make_preds([0, 1, 0, 1], [1, 0, 1, 0], {"a1": [0, 0, 1, 1]})
        assert accuracy_parity(p) == 0.0

    def test_known_rates(self):
        # P(pred=1|a=0) = 0.6, P(pred=1|a=1) = 0.4
        y_pred = [1, 1, 1, 0, 0] + [1, 1, 0, 0, 0]
        attr = [0] * 5 + [1] * 5
        p = make_preds([0] * 10, y_pred, {"a1": attr})
        expected = bf_accuracy_parity(p.y_pred, {"a1": np.asarray(attr)})
        assert abs(accuracy_parity(p) - expected) < 1e-15
        assert abs(expected - 1.6) < 1e-12  # 12 ordered pairs of |0.6,0.4,0.4,0.6| gaps

    def test_degenerate_group(self):
        p = make_preds([0, 1], [0, 1], {"a1": [1, 1]})
        with pytest.raises(DegenerateGroupError):
            accuracy_parity(p)


class TestFairnessDelta:
    def _report(self, dp1, dp2=0.1):
        return FairnessReport(acc=0.8, ap=0.5, dp={"a1": dp1, "a2": dp2}, eo={"a1": dp1, "a2": dp2})

    def test_identical_reports(self):
        r = self._report(0.2)
        d = fairness_delta(r, r)
        assert d.delta_dp == {"a1": 0.0, "a2": 0.0}

    def test_improvement_and_regression(self):
        base = self._report(0.193, 0.072)
        debiased = self._report(0.004, 0.105)
        d = fairness_delta(base, debiased)
        assert abs(d.delta_dp["a1"] - (-0.189)) < 1e-12
        assert abs(d.delta_dp["a2"] - 0.033) < 1e-12

    def test_attribute_mismatch(self):
        a = FairnessReport(acc=1, ap=0, dp={"a1": 0.0}, eo={"a1": 0.0})
        b = FairnessReport(acc=1, ap=0, dp={"a2": 0.0}, eo={"a2": 0.0})
        with pytest.raises(InvalidArgumentError):
            fairness_delta(a, b)


class TestOracleEquivalenceAndInvariances:
    def test_matches_brute_force(self):
        rng = Rng(77)
        for i in range(50):
            n = 8 + int(rng.integers(0, 193))
            k = 1 + int(rng.integers(0, 3))
            p = random_preds(rng, n, k)
            for name, attr in p.attributes.items():
                assert abs(demographic_parity(p, name) - bf_demographic_parity(p.y_pred, attr)) < 1e-12
                assert abs(equalized_odds(p, name) - bf_equalized_odds(p.y_true, p.y_pred, attr)) < 1e-12
            assert abs(balanced_accuracy(p) - bf_balanced_accuracy(p.y_true, p.y_pred, p.attributes)) < 1e-12
            assert abs(accuracy_parity(p) - bf_accuracy_parity(p.y_pred, p.attributes)) < 1e-12

    def test_row_permutation_invariance(self):
        rng = Rng(78)
        p = random_preds(rng, 60, 2)
        perm = rng.permutation(60)
        q = PredictionSet(
            y_true=p.y_true[perm],
            y_pred=p.y_pred[perm],
            y_score=p.y_score[perm],
            attributes={k: v[perm] for k, v in p.attributes.items()},
        )
        r1, r2 = evaluate(p), evaluate(q)
        assert r1.acc == r2.acc and r1.ap == r2.ap and r1.dp == r2.dp and r1.eo == r2.eo

    def test_group_label_swap_symmetry(self):
        rng = Rng(79)
        p = random_preds(rng, 80, 1)
        q = PredictionSet(
            y_true=p.y_true,
            y_pred=p.y_pred,
            y_score=p.y_score,
            attributes={"a1": 1 - p.attributes["a1"]},
        )
        assert demographic_parity(p, "a1") == demographic_parity(q, "a1")
        assert equalized_odds(p, "a1") == equalized_odds(q, "a1")

    def test_scores_never_matter(self):
        rng = Rng(80)
        p = random_preds(rng, 70, 2)
        q = PredictionSet(
            y_true=p.y_true,
            y_pred=p.y_pred,
            y_score=np.zeros(p.n),
            attributes=p.attributes,
        )
        assert evaluate(p).to_dict() == evaluate(q).to_dict()
