import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discorel.codec import Vocab
from discorel.errors import DataError
from discorel.metrics import score
from discorel.verbalizer import Verbalizer, builtin_verbalizer, predict


class TestBuiltinVerbalizers:
    def test_pdtb_second11_examples(self):
        v = builtin_verbalizer("pdtb_second11")
        assert len(v.labels) == 11
        assert v.label_of("because") == "Contingency.Cause"
        assert v.label_of("however") == "Comparison.Concession"
        assert v.label_of("finally") == "Expansion.List"
        assert v.label_of("fact") == "Expansion.Conjunction"

    def test_conll14_examples(self):
        v = builtin_verbalizer("conll14")
        assert len(v.labels) == 14
        assert v.label_of("if") == "Cont.Condition"
        assert v.label_of("unless") == "Exp.Alternative"
        assert v.label_of("except") == "Exp.Exception"
        assert v.label_of("after") == "Temp.Asynchronous.Succession"
        assert v.label_of("before") == "Temp.Asynchronous.Precedence"

    def test_pdtb_top4_merges_upward(self):
        v = builtin_verbalizer("pdtb_top4")
        assert sorted(v.labels) == ["Comparison", "Contingency", "Expansion", "Temporal"]
        assert v.label_of("instance") == "Expansion"
        assert v.label_of("since") == "Contingency"
        assert v.label_of("when") == "Temporal"
        assert v.label_of("though") == "Comparison"

    def test_answer_sets_disjoint_everywhere(self):
        for scheme in ("pdtb_top4", "pdtb_second11", "conll14"):
            v = builtin_verbalizer(scheme)
            words = [w for lab in v.labels for w in v.answer_words[lab]]
            assert len(words) == len(set(words)), scheme

    def test_unknown_scheme(self):
        with pytest.raises(DataError):
            builtin_verbalizer("pdtb_level3")

    def test_save_load_roundtrip(self, tmp_path):
        v = builtin_verbalizer("pdtb_second11")
        v.save(tmp_path / "v.tsv")
        w = Verbalizer.load(tmp_path / "v.tsv")
        assert w.labels == v.labels
        assert w.answer_words == v.answer_words

    def test_to_index_requires_vocab_coverage(self):
        v = Verbalizer({"A": ["because"], "B": ["zebra"]})
        vocab = Vocab(["because", "however"])
        with pytest.raises(DataError, match="zebra"):
            v.to_index(vocab)


class TestPredict:
    def _vindex(self):
        vocab = Vocab(["alpha", "beta", "gamma", "delta", "junk"])
        v = Verbalizer({"A": ["alpha", "beta"], "B": ["gamma", "delta"]})
        return v.to_index(vocab), vocab

    def test_argmax(self):
        vindex, vocab = self._vindex()
        logits = np.zeros(len(vocab))
        logits[vocab.id("gamma")] = 3.0
        label, dist = predict(logits, vindex)
        assert label == "B"
        assert dist[1] > dist[0]
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)

    def test_exact_tie_lexicographic(self):
        vindex, vocab = self._vindex()
        logits = np.zeros(len(vocab))  # all answer words equal mass
        label, dist = predict(logits, vindex)
        assert dist[0] == pytest.approx(dist[1], abs=1e-12)
        assert label == "A"

    def test_mass_on_non_answer_words_renormalized(self):
        vindex, vocab = self._vindex()
        logits = np.zeros(len(vocab))
        logits[vocab.id("junk")] = 30.0  # nearly all softmax mass off-answer
        _, dist = predict(logits, vindex)
        assert dist.sum() == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self):
        vindex, _ = self._vindex()
        logits = np.random.default_rng(0).normal(size=10)
        l1, d1 = predict(logits, vindex)
        l2, d2 = predict(logits + 123.4, vindex)
        assert l1 == l2
        assert np.allclose(d1, d2, atol=1e-9)


class TestScoreFixtures:
    """Hand-computed confusion-matrix oracles, frozen."""

    def test_fixture_spec_example(self):
        rep = score(["A", "B", "A"], [["A"], ["A"], ["B"]], ["A", "B"])
        assert rep.accuracy == pytest.approx(1 / 3)
        assert rep.per_class_f1 == {"A": 0.5, "B": 0.0}
        assert rep.macro_f1 == pytest.approx(0.25)

    def test_fixture_multigold_credits_matched(self):
        rep = score(["X"], [["Y", "X"]], ["X", "Y"])
        assert rep.accuracy == 1.0
        assert rep.confusion["X"]["X"] == 1
        assert rep.per_class_f1 == {"X": 1.0, "Y": 0.0}
        assert rep.macro_f1 == pytest.approx(0.5)

    def test_fixture_perfect(self):
        rep = score(["A", "B", "C"], [["A"], ["B"], ["C"]], ["A", "B", "C"])
        assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0

    def test_fixture_degenerate_single_prediction(self):
        rep = score(["A", "A", "A"], [["B"], ["C"], ["B"]], ["A", "B", "C"])
        assert rep.accuracy == 0.0
        assert rep.macro_f1 == 0.0
        assert rep.confusion["B"]["A"] == 2 and rep.confusion["C"]["A"] == 1

    def test_fixture_mixed_multigold(self):
        # i1 A/{A} hit; i2 A/{B,A} hit (second gold); i3 B/{B} hit;
        # i4 C/{B} miss ref B; i5 B/{A} miss ref A; i6 C/{C} hit
        preds = ["A", "A", "B", "C", "B", "C"]
        golds = [["A"], ["B", "A"], ["B"], ["B"], ["A"], ["C"]]
        rep = score(preds, golds, ["A", "B", "C"])
        assert rep.accuracy == pytest.approx(4 / 6)
        assert rep.per_class_f1["A"] == pytest.approx(0.8)
        assert rep.per_class_f1["B"] == pytest.approx(0.5)
        assert rep.per_class_f1["C"] == pytest.approx(2 / 3)
        assert rep.macro_f1 == pytest.approx((0.8 + 0.5 + 2 / 3) / 3)

    def test_pred_matching_second_gold_counts(self):
        rep = score(["B"], [["A", "B"]], ["A", "B"])
        assert rep.accuracy == 1.0

    def test_absent_class_contributes_zero(self):
        rep = score(["A"], [["A"]], ["A", "B", "Z"])
        assert rep.macro_f1 == pytest.approx(1 / 3)

    def test_length_mismatch_errors(self):
        with pytest.raises(DataError):
            score(["A"], [["A"], ["B"]], ["A", "B"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_macro_f1_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    labels = ["A", "B", "C", "D"]
    n = 30
    preds = [labels[i] for i in rng.integers(0, 4, size=n)]
    golds = [[labels[i]] for i in rng.integers(0, 4, size=n)]
    rep = score(preds, golds, labels)
    perm = rng.permutation(4)
    mapping = {labels[i]: labels[perm[i]] for i in range(4)}
    rep2 = score([mapping[p] for p in preds], [[mapping[g[0]]] for g in golds], labels)
    assert rep.macro_f1 == pytest.approx(rep2.macro_f1, abs=1e-12)
    assert rep.accuracy == pytest.approx(rep2.accuracy, abs=1e-12)
