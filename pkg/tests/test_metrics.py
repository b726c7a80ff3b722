import numpy as np
import pytest

from roofrisk import metrics as m

from oracles import brute_force_metrics

A, B = 1, 0


def test_perfect_prediction_diagonal(rng):
    truth = rng.integers(0, 8, (16, 16))
    cm = m.confusion(truth, truth)
    assert np.array_equal(cm.counts, np.diag(np.bincount(truth.ravel(), minlength=8)))
    assert m.weighted_accuracy(cm) == 1.0 and m.weighted_iou(cm) == 1.0
    assert m.binary_metrics(truth, truth) == (1.0, 1.0, 1.0)


def test_two_by_two_hand_count():
    pred = np.array([[A, A], [B, B]])
    truth = np.array([[A, B], [B, B]])
    cm = m.confusion(pred, truth)
    assert cm.counts[A, A] == 1 and cm.counts[B, A] == 1 and cm.counts[B, B] == 2
    assert cm.counts.sum() == cm.valid_total == 4
    assert m.weighted_accuracy(cm) == pytest.approx(0.75, abs=1e-15)


def test_iou_rows_vs_columns():
    truth = np.zeros((4, 4), int)
    truth[0:2, :] = 3
    pred = np.zeros((4, 4), int)
    pred[:, 0:2] = 3
    assert m.per_class_iou(m.confusion(pred, truth))[3] == pytest.approx(1 / 3)


def test_binary_all_background():
    truth = np.array([[1, 1], [0, 0]])
    assert m.binary_metrics(np.zeros((2, 2), int), truth) == (0.5, 0.0, 0.0)


def test_errors():
    with pytest.raises(ValueError, match="shape"):
        m.confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError, match="no valid pixels"):
        m.confusion(np.zeros((2, 2), int), np.zeros((2, 2), int), np.zeros((2, 2), bool))
    with pytest.raises(ValueError, match="shape"):
        m.binary_metrics(np.zeros((2, 2), int), np.zeros((3, 2), int))


def test_valid_mask_excludes_pixels():
    pred = np.array([[1, 2], [3, 4]])
    truth = np.array([[1, 0], [0, 0]])
    valid = np.array([[True, False], [False, False]])
    cm = m.confusion(pred, truth, valid)
    assert cm.valid_total == 1 and cm.counts[1, 1] == 1


def random_pair(rng, size=16):
    truth = rng.integers(0, 8, (size, size))
    noise = rng.random((size, size)) < rng.uniform(0, 1)
    pred = np.where(noise, rng.integers(0, 8, (size, size)), truth)
    return pred, truth


def test_matches_brute_force_oracle(rng):
    for _ in range(100):
        pred, truth = random_pair(rng)
        cm = m.confusion(pred, truth)
        wacc, wiou, binary = brute_force_metrics(pred, truth)
        assert m.weighted_accuracy(cm) == pytest.approx(wacc, abs=1e-12)
        assert m.weighted_iou(cm) == pytest.approx(wiou, abs=1e-12)
        assert m.binary_metrics(pred, truth) == pytest.approx(binary, abs=1e-12)


def test_sparse_classes_match_oracle(rng):
    for _ in range(30):
        truth = rng.choice([0, 2, 5], size=(16, 16))
        pred = rng.choice([0, 2, 6], size=(16, 16))
        cm = m.confusion(pred, truth)
        wacc, wiou, _ = brute_force_metrics(pred, truth)
        assert m.weighted_accuracy(cm) == pytest.approx(wacc, abs=1e-12)
        assert m.weighted_iou(cm) == pytest.approx(wiou, abs=1e-12)


def test_trace_identity_full_support(rng):
    for _ in range(100):
        counts = rng.integers(1, 1000, (8, 8))
        cm = m.ConfusionMatrix(counts)
        assert m.weighted_accuracy(cm) == pytest.approx(np.trace(counts) / counts.sum(), abs=1e-12)


def test_permutation_invariance(rng):
    for _ in range(20):
        pred, truth = random_pair(rng)
        perm = rng.permutation(8)
        a = m.confusion(pred, truth)
        b = m.confusion(perm[pred], perm[truth])
        assert m.weighted_accuracy(a) == pytest.approx(m.weighted_accuracy(b), abs=1e-12)
        assert m.weighted_iou(a) == pytest.approx(m.weighted_iou(b), abs=1e-12)


def test_bounds_and_merge(rng):
    total = m.ConfusionMatrix.empty()
    preds, truths = [], []
    for _ in range(5):
        pred, truth = random_pair(rng, 8)
        preds.append(pred)
        truths.append(truth)
        cm = m.confusion(pred, truth)
        total = total + cm
        for v in (m.weighted_accuracy(cm), m.weighted_iou(cm), *m.binary_metrics(pred, truth)):
            assert 0.0 <= v <= 1.0
    whole = m.confusion(np.concatenate(preds), np.concatenate(truths))
    assert np.array_equal(total.counts, whole.counts)


def test_report_variants(rng):
    pred, truth = random_pair(rng)
    cm = m.confusion(pred, truth)
    rep = m.report(cm, m.binary_metrics(pred, truth))
    assert rep["valid_pixels"] == 256 and len(rep["per_class"]) == 8
    assert rep["weighted_accuracy_no_background"] == m.weighted_accuracy(cm, include_background=False)
    assert "background included" in rep["weighting"]
    assert set(rep["binary"]) == {"accuracy", "precision", "recall"}
    assert m.format_report(rep).endswith("\n")
