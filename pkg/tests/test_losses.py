import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discorel import losses
from discorel.errors import DataError
from discorel.losses import VerbalizerIndex, cm_loss, mlm_loss, tune_loss, tune_loss_bwd


class TestCmLoss:
    def test_uniform_logits_log_vocab(self):
        logits = np.zeros((4, 8000))
        loss, _ = cm_loss(logits, np.array([5, 17, 0, 4213]))
        assert loss == pytest.approx(math.log(8000), abs=1e-9)
        assert loss == pytest.approx(8.987, abs=1e-3)

    def test_saturated_correct_logits(self):
        logits = np.zeros((2, 50))
        logits[0, 7] = 50.0
        logits[1, 3] = 50.0
        loss, _ = cm_loss(logits, np.array([7, 3]))
        assert loss < 1e-6

    def test_batch_mean_equals_singles(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 20))
        targets = rng.integers(0, 20, size=5)
        batch, _ = cm_loss(logits, targets)
        singles = [cm_loss(logits[i : i + 1], targets[i : i + 1])[0] for i in range(5)]
        assert batch == pytest.approx(np.mean(singles), abs=1e-12)

    def test_gradient_matches_numeric(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 9))
        targets = np.array([2, 0, 8])
        _, cache = cm_loss(logits, targets)
        d = losses.cm_loss_bwd(cache)
        eps = 1e-6
        for i, j in [(0, 2), (1, 5), (2, 8)]:
            lp = cm_loss(logits + eps * _onehot(logits.shape, i, j), targets)[0]
            lm = cm_loss(logits - eps * _onehot(logits.shape, i, j), targets)[0]
            assert d[i, j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)


def _onehot(shape, i, j):
    e = np.zeros(shape)
    e[i, j] = 1.0
    return e


def _logits_for_losses(values):
    """Rows whose target-class cross entropy equals each requested value."""
    rows = []
    for v in values:
        p = math.exp(-v)
        rows.append(np.log([p, 1.0 - p]))
    return np.asarray(rows)


class TestMlmLoss:
    def test_two_level_mean_vs_flat(self):
        # instance A: position losses {1, 3}; instance B: {5}
        logits = _logits_for_losses([1.0, 3.0, 5.0])
        targets = np.zeros(3, dtype=np.int64)
        inst = np.array([0, 0, 1])
        loss, _, empty = mlm_loss(logits, targets, inst, batch_size=2)
        assert not empty
        assert loss == pytest.approx(3.5, abs=1e-9)
        assert loss != pytest.approx(3.0, abs=1e-6)  # flat mean would be 3.0

    def test_uniform_logits(self):
        v = 31
        logits = np.zeros((6, v))
        loss, _, _ = mlm_loss(logits, np.arange(6), np.array([0, 0, 1, 1, 2, 2]), 3)
        assert loss == pytest.approx(math.log(v), abs=1e-9)

    def test_empty_instance_excluded_from_denominator(self):
        logits = _logits_for_losses([4.0])
        loss, _, _ = mlm_loss(logits, np.zeros(1, dtype=np.int64), np.array([1]), batch_size=2)
        assert loss == pytest.approx(4.0, abs=1e-9)

    def test_all_empty_flag(self):
        loss, cache, empty = mlm_loss(np.zeros((0, 5)), np.zeros(0, dtype=np.int64),
                                      np.zeros(0, dtype=np.int64), 4)
        assert loss == 0.0 and empty and cache is None

    def test_gradient_matches_numeric(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 7))
        targets = rng.integers(0, 7, size=4)
        inst = np.array([0, 0, 0, 2])
        _, cache, _ = mlm_loss(logits, targets, inst, 3)
        d = losses.mlm_loss_bwd(cache)
        eps = 1e-6
        for i, j in [(0, 1), (3, 6), (2, 0)]:
            lp = mlm_loss(logits + eps * _onehot(logits.shape, i, j), targets, inst, 3)[0]
            lm = mlm_loss(logits - eps * _onehot(logits.shape, i, j), targets, inst, 3)[0]
            assert d[i, j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)


def _two_label_index():
    # labels A -> ids {0, 1}, B -> ids {2, 3} in a 6-word vocabulary
    return VerbalizerIndex(["A", "B"], [[0, 1], [2, 3]])


class TestTuneLoss:
    def test_mass_aggregation_example(self):
        # answer-word softmax masses A: .2+.1, B: .3+.4 -> P(A) renormalized 0.3
        vindex = _two_label_index()
        probs = np.array([[0.2, 0.1, 0.3, 0.4, 0.0, 0.0]])
        probs[probs == 0.0] = 1e-300
        logits = np.log(probs)
        loss, _ = tune_loss(logits, vindex, np.array([0]))
        assert loss == pytest.approx(-math.log(0.3), abs=1e-9)
        assert loss == pytest.approx(1.204, abs=1e-3)

    def test_renormalization_over_union(self):
        # junk words soak up half the softmax mass; the label distribution
        # still renormalizes over the answer union
        vindex = _two_label_index()
        probs = np.array([[0.10, 0.05, 0.15, 0.20, 0.25, 0.25]])
        logits = np.log(probs)
        loss, _ = tune_loss(logits, vindex, np.array([0]))
        assert loss == pytest.approx(-math.log(0.15 / 0.5), abs=1e-9)

    def test_single_label_verbalizer_zero_loss(self):
        vindex = VerbalizerIndex(["only"], [[1, 4]])
        logits = np.random.default_rng(0).normal(size=(3, 6))
        loss, _ = tune_loss(logits, vindex, np.zeros(3, dtype=np.int64))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_shift_invariance(self):
        vindex = _two_label_index()
        logits = np.random.default_rng(1).normal(size=(2, 6))
        l1, _ = tune_loss(logits, vindex, np.array([1, 0]))
        l2, _ = tune_loss(logits + 17.3, vindex, np.array([1, 0]))
        assert l1 == pytest.approx(l2, abs=1e-9)

    def test_gold_outside_label_set_errors(self):
        with pytest.raises(DataError):
            tune_loss(np.zeros((1, 6)), _two_label_index(), np.array([5]))

    def test_disjointness_enforced(self):
        with pytest.raises(DataError):
            VerbalizerIndex(["A", "B"], [[0, 1], [1, 2]])

    def test_gradient_matches_numeric(self):
        vindex = _two_label_index()
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(3, 6))
        gold = np.array([0, 1, 0])
        _, cache = tune_loss(logits, vindex, gold)
        d = tune_loss_bwd(cache, vindex)
        eps = 1e-6
        for i in range(3):
            for j in range(6):
                lp = tune_loss(logits + eps * _onehot(logits.shape, i, j), vindex, gold)[0]
                lm = tune_loss(logits - eps * _onehot(logits.shape, i, j), vindex, gold)[0]
                assert d[i, j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tune_loss_shift_invariance_property(seed):
    vindex = _two_label_index()
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, 6)) * 5
    shift = float(rng.normal()) * 10
    gold = rng.integers(0, 2, size=2)
    l1, _ = tune_loss(logits, vindex, gold)
    l2, _ = tune_loss(logits + shift, vindex, gold)
    assert l1 == pytest.approx(l2, rel=1e-9, abs=1e-9)
