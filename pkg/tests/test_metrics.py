import json
import math

import numpy as np
import pytest

from cxrkit.errors import DegenerateClassError, InvalidTargetError, LabelOutOfRangeError, NonFiniteError
from cxrkit.metrics import (LossInputs, binary_auc, confusion, derive_metrics, evaluate, one_hot, roc_auc,
                            softmax, wce_loss)


def test_softmax_rows_and_shift_invariance():
    logits = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]])
    probs = softmax(logits)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    np.testing.assert_allclose(probs[1], [0.5, 0.5, 0.0], atol=1e-12)
    np.testing.assert_allclose(softmax(logits[:1] + 50.0), probs[:1])
    with pytest.raises(NonFiniteError):
        softmax(np.array([[np.nan, 1.0]]))


def test_wce_loss_uniform_logits():
    inputs = LossInputs(np.zeros((1, 4)), one_hot([2], 4))
    loss, _ = wce_loss(inputs)
    assert loss == pytest.approx(math.log(4))


def test_wce_loss_scales_with_class_weight():
    logits = np.array([[0.3, -0.2]])
    targets = one_hot([1], 2)
    plain, grad_plain = wce_loss(LossInputs(logits, targets, [1.0, 1.0]))
    heavy, grad_heavy = wce_loss(LossInputs(logits, targets, [1.0, 5.6477]))
    assert heavy == pytest.approx(5.6477 * plain)
    np.testing.assert_allclose(grad_heavy, 5.6477 * grad_plain)


def test_wce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    targets = one_hot([0, 2, 1, 1, 0], 3)
    weights = [0.7, 2.0, 1.3]
    _, grad = wce_loss(LossInputs(logits, targets, weights))
    h = 1e-6
    for i, j in [(0, 0), (1, 2), (3, 1), (4, 2)]:
        plus, minus = logits.copy(), logits.copy()
        plus[i, j] += h
        minus[i, j] -= h
        numeric = (wce_loss(LossInputs(plus, targets, weights))[0] -
                   wce_loss(LossInputs(minus, targets, weights))[0]) / (2 * h)
        assert grad[i, j] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_wce_loss_validation():
    with pytest.raises(InvalidTargetError):
        LossInputs(np.zeros((1, 2)), np.array([[0.5, 0.5]]))
    with pytest.raises(InvalidTargetError):
        LossInputs(np.zeros((1, 2)), np.array([[0.0, 1.0]]), [1.0, 0.0])
    with pytest.raises(InvalidTargetError):
        LossInputs(np.zeros((1, 3)), np.array([[0.0, 1.0]]))
    with pytest.raises(LabelOutOfRangeError):
        one_hot([3], 3)


def test_confusion_counts():
    cm = confusion([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2)
    assert cm.counts.tolist() == [[1, 1], [1, 2]]
    assert cm.one_vs_rest(1) == (2, 1, 1, 1)
    with pytest.raises(LabelOutOfRangeError):
        confusion([0, 2], [0, 0], 2)


def test_derive_metrics_binary_example():
    cm = confusion([1] * 10 + [0] * 90, [1] * 8 + [0] * 2 + [1] * 5 + [0] * 85, 2)
    covid = derive_metrics(cm).per_class[1]
    assert covid.accuracy == pytest.approx(0.93)
    assert covid.precision == pytest.approx(8 / 13)
    assert covid.recall == pytest.approx(0.8)
    assert covid.specificity == pytest.approx(85 / 90)
    assert covid.f1 == pytest.approx(2 * (8 / 13) * 0.8 / (8 / 13 + 0.8))


def test_derive_metrics_from_one_vs_rest_counts():
    # TP=9, FN=2, FP=3, TN=107 for class 1
    cm = confusion([1] * 11 + [0] * 110, [1] * 9 + [0] * 2 + [1] * 3 + [0] * 107, 2)
    assert cm.one_vs_rest(1) == (9, 3, 2, 107)
    covid = derive_metrics(cm).per_class[1]
    assert covid.precision == pytest.approx(0.75)
    assert covid.recall == pytest.approx(0.818181818)
    assert covid.specificity == pytest.approx(0.972727272)


def test_derive_metrics_undefined_ratios():
    report = derive_metrics(confusion([0, 0], [0, 0], 2), ["a", "b"])
    b = report.per_class[1]
    assert b.precision == 0.0 and b.recall == 0.0
    assert {"precision", "recall", "f1"} <= set(b.undefined)
    assert report.per_class[0].accuracy == 1.0
    assert "precision" in report.macro.undefined


def test_perfect_predictions_give_unit_metrics():
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    report = evaluate(one_hot(labels, 4), labels)
    for name in ("accuracy", "precision", "recall", "specificity", "f1", "auc"):
        assert getattr(report.macro, name) == pytest.approx(1.0)


def test_binary_auc_examples():
    assert binary_auc([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0
    assert binary_auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0
    assert binary_auc([1, 0], [0.5, 0.5]) == 0.5
    with pytest.raises(DegenerateClassError):
        binary_auc([1, 1], [0.2, 0.3])


def test_binary_auc_matches_pairwise_count():
    rng = np.random.default_rng(42)
    labels = rng.integers(0, 2, size=200).astype(bool)
    scores = np.round(rng.uniform(size=200), 2)
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    assert binary_auc(labels, scores) == pytest.approx(wins / (len(pos) * len(neg)))


def test_roc_auc_skips_degenerate_class():
    scores = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.6, 0.3, 0.1]])
    result = roc_auc([0, 1, 0], scores)
    assert result.per_class[2] is None
    assert result.macro == pytest.approx(1.0)


def test_evaluate_report_json(tmp_path):
    probs = softmax(np.random.default_rng(1).normal(size=(12, 3)))
    labels = np.array([0, 1, 2] * 4)
    report = evaluate(probs, labels, [1.0, 2.0, 0.5], class_names=["Normal", "COVID19", "Other"])
    path = report.to_json(tmp_path / "report.json")
    data = json.loads(path.read_text())
    assert data["averaging"] == "macro"
    assert set(data["per_class"]) == {"Normal", "COVID19", "Other"}
    assert sum(map(sum, data["confusion_matrix"]["counts"])) == 12
    assert data["loss"] > 0
    macro_recall = np.mean([m.recall for m in report.per_class])
    assert report.macro.recall == pytest.approx(macro_recall)
