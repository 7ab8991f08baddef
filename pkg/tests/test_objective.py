import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relgnn.errors import DimensionError, InputError, UndefinedMetricError, ValidationError
from relgnn.graph import LabelTable
from relgnn.numeric import Tensor
from relgnn.objective import (ClassBalance, auc, average_reports, balanced_loss, bce_loss,
                              binarize_predictions, compute_balance, f1_score, metric_report,
                              roc_points)

from conftest import check_op_grads, leaf
from oracles import auc_pairs, balanced_loss_scalar

WORKED_LOSS = -2 * 0.75 * math.log(0.55 / 1.05)


class TestBalance:
    def test_examples(self):
        assert compute_balance(LabelTable([1], np.array([[1], [0], [0], [1]]))).r_pos.tolist() == [0.5]
        assert compute_balance(LabelTable([1], np.ones((3, 1), int))).r_pos.tolist() == [1.0]
        bal = ClassBalance(np.array([0.25, 0.56]))
        np.testing.assert_allclose(bal.r_neg, [0.75, 0.44])
        assert ClassBalance.uniform(3).r_pos.tolist() == [0.5] * 3

    def test_au12_ratio(self):
        # 56 positive of 100 frames gives the reported BP4D ratio
        rows = np.zeros((100, 1), int)
        rows[:56] = 1
        assert compute_balance(LabelTable([12], rows)).r_pos[0] == 0.56


class TestLoss:
    def test_worked_value(self):
        v = balanced_loss(Tensor(np.array([[0.5]])), [[1]], ClassBalance(np.array([0.25])))
        assert v.item() == pytest.approx(0.96994, abs=1e-4)
        assert v.item() == pytest.approx(WORKED_LOSS, abs=1e-15)

    def test_perfect_cell_is_zero(self):
        bal = ClassBalance(np.array([0.3]))
        assert balanced_loss(Tensor(np.array([[1.0]])), [[1]], bal).item() == 0.0
        assert balanced_loss(Tensor(np.array([[0.0]])), [[0]], bal).item() == 0.0

    def test_floor_is_finite(self):
        v = balanced_loss(Tensor(np.array([[0.0]])), [[1]], ClassBalance(np.array([0.5])))
        assert v.item() == pytest.approx(-math.log(0.05 / 1.05), abs=1e-15)

    def test_matches_scalar_oracle(self, rng):
        for n, c in [(1, 1), (3, 2), (7, 5), (16, 9)]:
            p = rng.uniform(0, 1, (n, c))
            l = rng.integers(0, 2, (n, c))
            r = rng.uniform(0.01, 0.99, c)
            got = balanced_loss(Tensor(p), l, ClassBalance(r)).item()
            assert abs(got - balanced_loss_scalar(p.tolist(), l.tolist(), r.tolist())) <= 1e-12

    def test_bce_is_uniform_balance(self, rng):
        p, l = rng.uniform(0, 1, (5, 3)), rng.integers(0, 2, (5, 3))
        assert bce_loss(Tensor(p), l).item() == balanced_loss(Tensor(p), l, ClassBalance.uniform(3)).item()

    def test_batch_decomposes(self, rng):
        p, l = rng.uniform(0, 1, (6, 4)), rng.integers(0, 2, (6, 4))
        bal = ClassBalance(rng.uniform(0.1, 0.9, 4))
        whole = balanced_loss(Tensor(p), l, bal).item()
        parts = [balanced_loss(Tensor(p[i:i + 1]), l[i:i + 1], bal).item() for i in range(6)]
        assert abs(whole - np.mean(parts)) <= 1e-12

    def test_gradient(self, rng):
        l = rng.integers(0, 2, (4, 3))
        bal = ClassBalance(rng.uniform(0.1, 0.9, 3))
        p = leaf(rng.uniform(0.05, 0.95, (4, 3)))
        check_op_grads(lambda x: balanced_loss(x, l, bal), [p], np.array(1.0))

    def test_errors(self):
        bal = ClassBalance(np.array([0.5]))
        with pytest.raises(ValidationError):
            balanced_loss(Tensor(np.array([[1.2]])), [[1]], bal)
        with pytest.raises(ValidationError):
            balanced_loss(Tensor(np.array([[0.2]])), [[2]], bal)
        with pytest.raises(DimensionError):
            balanced_loss(Tensor(np.array([[0.2]])), [[1, 0]], bal)
        with pytest.raises(DimensionError):
            balanced_loss(Tensor(np.array([[0.2, 0.3]])), [[1, 0]], bal)


class TestF1:
    def test_examples(self):
        assert f1_score([1, 0, 1], [1, 0, 1])[2] == 1.0
        assert f1_score([0, 1, 0], [1, 0, 1])[2] == 0.0
        assert f1_score([1, 1, 0], [1, 0, 1]) == (0.5, 0.5, 0.5)

    def test_zero_division(self):
        assert f1_score([0, 0], [0, 0]) == (0.0, 0.0, 0.0)

    def test_binarize(self):
        assert binarize_predictions([0.5, 0.49, 0.51]).tolist() == [1, 0, 1]
        assert binarize_predictions(np.array([[0.2, 0.7]])).tolist() == [[0, 1]]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40),
           st.randoms(use_true_random=False))
    def test_permutation_invariant(self, pairs, rnd):
        pred, truth = map(list, zip(*pairs))
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        sp, st_ = map(list, zip(*shuffled))
        assert f1_score(pred, truth) == f1_score(sp, st_)


class TestAUC:
    def test_examples(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0
        assert auc([0.1, 0.9], [1, 0]) == 0.0
        assert auc([0.8, 0.8], [1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
    def test_matches_pair_oracle_with_ties(self, pairs):
        scores, truth = zip(*pairs)
        if all(truth) or not any(truth):
            return
        s = [v / 6 for v in scores]
        assert auc(s, truth) == float(auc_pairs(s, truth))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(-50, 50), st.booleans()), min_size=2, max_size=40))
    def test_monotone_invariance(self, pairs):
        scores, truth = zip(*pairs)
        if all(truth) or not any(truth):
            return
        s = np.array(scores, dtype=np.float64)
        # integer scores keep the cubic transform exact, hence strictly increasing
        assert auc(s, truth) == auc(s ** 3 + 5 * s - 2, truth)


class TestReport:
    def test_report_and_flags(self):
        probs = np.array([[0.9, 0.2], [0.1, 0.3], [0.7, 0.4]])
        labels = np.array([[1, 0], [0, 0], [0, 0]])
        rep = metric_report(probs, labels, [1, 2])
        assert rep.per_au[1]["f1"] == pytest.approx(2 / 3)
        assert rep.per_au[1]["auc"] == 1.0
        assert rep.per_au[2]["auc"] is None
        assert any("AU2" in f for f in rep.flags)
        assert rep.macro["auc"] == 1.0
        assert rep.macro_f1 == pytest.approx(1 / 3)
        obj = rep.to_obj()
        assert set(obj["per_au"]) == {"AU1", "AU2"}

    def test_average(self, rng):
        reps = [metric_report(rng.uniform(size=(20, 2)), rng.integers(0, 2, (20, 2)), [1, 2])
                for _ in range(3)]
        avg = average_reports(reps)
        for au in (1, 2):
            for m in ("f1", "auc"):
                assert avg.per_au[au][m] == pytest.approx(np.mean([r.per_au[au][m] for r in reps]),
                                                          abs=1e-15)
        with pytest.raises(InputError):
            average_reports([])
        with pytest.raises(ValidationError):
            average_reports([reps[0], metric_report(np.zeros((2, 1)), np.zeros((2, 1)), [3])])


class TestROC:
    def test_points(self):
        pts = roc_points([0.9, 0.8, 0.8, 0.1], [1, 0, 1, 0])
        assert pts.tolist() == [[np.inf, 0, 0], [0.9, 0, 0.5], [0.8, 0.5, 1.0], [0.1, 1.0, 1.0]]

    def test_trapezoid_equals_auc(self, rng):
        s = rng.integers(0, 5, 50) / 4
        t = rng.integers(0, 2, 50)
        pts = roc_points(s, t)
        area = np.sum(np.diff(pts[:, 1]) * (pts[1:, 2] + pts[:-1, 2]) / 2)
        assert area == pytest.approx(auc(s, t), abs=1e-15)
