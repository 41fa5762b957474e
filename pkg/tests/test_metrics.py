"""Confusion matrix, macro/positive F1, and the discrepancy report.

Expected F1 values are frozen from exact Fraction arithmetic done
independently of the implementation; scikit-learn serves as a second
independent oracle on random matrices.
"""

from fractions import Fraction

import numpy as np
import pytest

from speechsel.errors import LabelOutOfRange, LengthMismatch
from speechsel.metrics import (
    ConfusionMatrix,
    confusion_matrix,
    discrepancy_report,
    macro_f1,
    metrics_summary,
    per_class_f1,
    positive_f1,
)

# (matrix, exact macro F1, exact positive-class-1 F1), computed by hand with
# Fraction arithmetic.
FIXED_CASES = [
    ([[1, 1], [0, 2]], Fraction(11, 15), Fraction(4, 5)),
    ([[3, 1], [0, 0]], Fraction(3, 7), Fraction(0)),
    ([[5, 0], [0, 5]], Fraction(1), Fraction(1)),
    ([[0, 5], [5, 0]], Fraction(0), Fraction(0)),
    ([[10, 2], [3, 5]], Fraction(11, 15), Fraction(2, 3)),
    ([[0, 0], [0, 4]], Fraction(1, 2), Fraction(1)),
    ([[2, 0, 1], [1, 3, 0], [0, 1, 2]], Fraction(25, 36), Fraction(3, 4)),
    ([[4, 0, 0], [0, 0, 0], [1, 0, 5]], Fraction(178, 297), Fraction(0)),
    ([[1, 2, 3], [4, 5, 6], [7, 8, 9]], Fraction(55, 189), Fraction(1, 3)),
    (
        [[6, 1, 0, 1], [0, 7, 1, 0], [2, 0, 8, 0], [0, 0, 0, 0]],
        Fraction(375, 608),
        Fraction(7, 8),
    ),
]


@pytest.mark.parametrize("counts,macro,pos", FIXED_CASES)
def test_fixed_matrices_match_fraction_oracle(counts, macro, pos):
    cm = ConfusionMatrix(np.array(counts, dtype=np.int64))
    assert abs(macro_f1(cm) - float(macro)) <= 1e-12
    assert abs(positive_f1(cm, 1) - float(pos)) <= 1e-12


def test_hand_case_from_labels():
    # gold [0,0,1,1], pred [0,1,1,1] builds [[1,1],[0,2]]: macro 0.7333...
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert macro_f1(cm) == pytest.approx(float(Fraction(11, 15)), abs=1e-12)


def test_single_class_predictor_halves_macro():
    # all predictions one class on a 2-class set: macro = F1(that class) / 2
    cm = confusion_matrix([0, 0, 0, 1], [0, 0, 0, 0], 2)
    f1_major = per_class_f1(cm)[0]
    assert macro_f1(cm) == pytest.approx(f1_major / 2.0, abs=1e-12)


def test_all_negative_predictor_positive_f1_zero():
    cm = confusion_matrix([0, 1, 0, 1, 1], [0, 0, 0, 0, 0], 2)
    assert positive_f1(cm, 1) == 0.0


def test_absent_class_contributes_zero():
    # six classes, the fifth never appears in gold or predictions
    gold = [0, 1, 2, 3, 5, 0, 1]
    pred = [0, 1, 2, 3, 5, 1, 1]
    cm = confusion_matrix(gold, pred, 6)
    f1s = per_class_f1(cm)
    assert f1s[4] == 0.0
    assert macro_f1(cm) == pytest.approx(float(f1s.sum() / 6.0), abs=1e-12)


def test_matches_sklearn_on_random_labels():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for trial in range(20):
        n_classes = int(rng.integers(2, 7))
        n = int(rng.integers(5, 60))
        gold = rng.integers(0, n_classes, size=n)
        pred = rng.integers(0, n_classes, size=n)
        cm = confusion_matrix(gold, pred, n_classes)
        ours = macro_f1(cm)
        ref = sklearn_metrics.f1_score(
            gold, pred, labels=list(range(n_classes)), average="macro", zero_division=0
        )
        assert ours == pytest.approx(ref, abs=1e-12)
        ref_cm = sklearn_metrics.confusion_matrix(gold, pred, labels=list(range(n_classes)))
        assert np.array_equal(cm.counts, ref_cm)


def test_input_validation():
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(LabelOutOfRange):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(LabelOutOfRange):
        confusion_matrix([0, 1], [0, -1], 2)
    cm = confusion_matrix([0, 1], [0, 1], 2)
    with pytest.raises(LabelOutOfRange):
        positive_f1(cm, 2)


def test_metrics_summary_roundtrip():
    s = metrics_summary([0, 1, 1], [0, 1, 0], 2, class_names=["neg", "pos"])
    assert s["confusion"] == [[1, 0], [1, 1]]
    assert s["macro_f1"] == pytest.approx((2 / 3 + 2 / 3) / 2)
    assert s["positive_f1"] == pytest.approx(2 / 3)


def test_discrepancy_report_counts_and_lift():
    gold = [0, 0, 1, 1, 1]
    a = [0, 0, 0, 1, 1]  # text-only style predictions
    b = [0, 0, 1, 1, 0]  # multimodal style predictions
    tokens = [[7], [], [7, 9], [9], [9, 9]]
    rep = discrepancy_report(gold, a, b, tokens, 2)
    assert len(rep.disagreements) == 2
    assert rep.flip_counts == {"0->1": 1, "1->0": 1}
    # token 9 appears 4 times, always under gold class 1
    assert rep.token_stats[9]["per_class"] == [0, 4]
    assert rep.token_stats[9]["total"] == 4
    # association counts across classes sum to the token's corpus frequency
    for stats in rep.token_stats.values():
        assert sum(stats["per_class"]) == stats["total"]
    # lift of token 9 for class 1 = (4/4) / (3/5)
    assert rep.token_stats[9]["lift"][1] == pytest.approx((4 / 4) / (3 / 5))
    md = rep.to_markdown()
    assert "| 9 |" in md
    js = rep.to_json()
    assert '"9"' in js


def test_discrepancy_length_mismatch():
    with pytest.raises(LengthMismatch):
        discrepancy_report([0], [0, 1], [0], [[]], 2)
