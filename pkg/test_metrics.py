"""Multi-label metrics, AUC and threshold tuning"""

import numpy as np
import pytest

from mrmp.errors import ShapeError
from mrmp.models.schemas import METRIC_NAMES
from mrmp.services import metrics_service as ms


def oracle_metrics(Y, P):
    M, L = Y.shape
    acc = sum(all(Y[i, j] == P[i, j] for j in range(L)) for i in range(M)) / M
    eb = []
    for i in range(M):
        inter = sum(Y[i, j] * P[i, j] for j in range(L))
        denom = sum(Y[i]) + sum(P[i])
        eb.append(1.0 if denom == 0 else 2 * inter / denom)
    tp = [sum(Y[i, j] and P[i, j] for i in range(M)) for j in range(L)]
    fp = [sum((not Y[i, j]) and P[i, j] for i in range(M)) for j in range(L)]
    fn = [sum(Y[i, j] and not P[i, j] for i in range(M)) for j in range(L)]
    ma = [1.0 if 2 * tp[j] + fp[j] + fn[j] == 0 else 2 * tp[j] / (2 * tp[j] + fp[j] + fn[j]) for j in range(L)]
    pooled = 2 * sum(tp) + sum(fp) + sum(fn)
    mi = 1.0 if pooled == 0 else 2 * sum(tp) / pooled
    return {"acc": acc, "ebf1": sum(eb) / M, "mif1": mi, "maf1": sum(ma) / L}


def oracle_auc(y, s):
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        return np.nan
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_binarize_is_strict():
    np.testing.assert_array_equal(ms.binarize(np.array([[0.5, 0.51]]), 0.5), [[0, 1]])
    np.testing.assert_array_equal(ms.binarize(np.array([[0.2, 0.4]]), 0.3), [[0, 1]])
    np.testing.assert_array_equal(ms.binarize(np.array([[0.01, 0.9]]), 1e-9), [[1, 1]])
    with pytest.raises(ValueError):
        ms.binarize(np.array([[0.5]]), 1.0)


def test_ebf1_worked_example():
    Y = np.array([[1, 0, 1, 0]])
    P = np.array([[1, 1, 1, 0]])
    assert ms.evaluate(Y, P)["ebf1"] == pytest.approx(0.8)


def test_perfect_prediction_scores_one():
    Y = np.array([[1, 0, 1], [0, 0, 0], [0, 1, 0]])
    assert ms.evaluate(Y, Y) == {"acc": 1.0, "ebf1": 1.0, "mif1": 1.0, "maf1": 1.0}


def test_evaluate_matches_oracle(rng):
    for _ in range(1000):
        M, L = int(rng.integers(1, 25)), int(rng.integers(1, 7))
        density = rng.uniform(0.05, 0.6)
        Y = (rng.random((M, L)) < density).astype(np.uint8)
        P = (rng.random((M, L)) < density).astype(np.uint8)
        expected = oracle_metrics(Y, P)
        got = ms.evaluate(Y, P)
        for name in METRIC_NAMES:
            assert got[name] == pytest.approx(expected[name], abs=1e-12)


def test_evaluate_large_random_set(rng):
    Y = (rng.random((1000, 6)) < 0.2).astype(np.uint8)
    P = (rng.random((1000, 6)) < 0.2).astype(np.uint8)
    expected = oracle_metrics(Y, P)
    got = ms.evaluate(Y, P)
    for name in METRIC_NAMES:
        assert got[name] == pytest.approx(expected[name], abs=1e-12)


def test_mif1_equals_pooled_f1(rng):
    Y = (rng.random((30, 5)) < 0.4).astype(np.uint8)
    P = (rng.random((30, 5)) < 0.4).astype(np.uint8)
    counts = ms.confusion_counts(Y, P)
    assert np.all(counts.tp + counts.fp + counts.tn + counts.fn == 30)
    tp, fp, fn = counts.tp.sum(), counts.fp.sum(), counts.fn.sum()
    assert ms.evaluate(Y, P)["mif1"] == pytest.approx(2 * tp / (2 * tp + fp + fn))


def test_evaluate_shape_mismatch():
    with pytest.raises(ShapeError):
        ms.evaluate(np.zeros((2, 3)), np.zeros((2, 4)))


def test_auc_examples():
    Y = np.array([[1], [1], [0], [0]])
    assert ms.auc_per_label(Y, np.array([[0.9], [0.5], [0.5], [0.1]]))[0] == pytest.approx(0.875)
    assert ms.auc_per_label(Y, np.array([[0.9], [0.8], [0.2], [0.1]]))[0] == 1.0
    assert ms.auc_per_label(Y, np.array([[0.1], [0.2], [0.8], [0.9]]))[0] == 0.0


def test_auc_undefined_label_is_nan():
    Y = np.array([[1, 0], [1, 1]])
    auc = ms.auc_per_label(Y, np.array([[0.3, 0.2], [0.4, 0.9]]))
    assert np.isnan(auc[0])
    assert auc[1] == 1.0


def test_auc_matches_pairwise_oracle(rng):
    for _ in range(1000):
        M, L = int(rng.integers(2, 20)), int(rng.integers(1, 5))
        Y = (rng.random((M, L)) < 0.4).astype(np.uint8)
        scores = np.round(rng.random((M, L)), 1)
        auc = ms.auc_per_label(Y, scores)
        for j in range(L):
            expected = oracle_auc(Y[:, j], scores[:, j])
            if np.isnan(expected):
                assert np.isnan(auc[j])
            else:
                assert auc[j] == pytest.approx(expected, abs=1e-12)


def test_auc_invariant_under_monotone_transform(rng):
    Y = (rng.random((40, 3)) < 0.5).astype(np.uint8)
    scores = rng.random((40, 3))
    np.testing.assert_allclose(ms.auc_per_label(Y, scores), ms.auc_per_label(Y, np.exp(3 * scores) - 2))


def test_tune_threshold_prefers_half_on_ties():
    Y = np.array([[1, 0], [0, 1]])
    t, value = ms.tune_threshold(Y, Y.astype(float), "ebf1")
    assert t == 0.5
    assert value == 1.0


def test_tune_threshold_finds_lower_threshold():
    Y = np.array([[1], [1], [0], [0]])
    scores = np.array([[0.4], [0.4], [0.3], [0.3]])
    t, value = ms.tune_threshold(Y, scores, "ebf1")
    assert t == pytest.approx(0.35)
    assert value == 1.0
    assert ms.evaluate(Y, ms.binarize(scores, t))["ebf1"] == value


def test_tune_threshold_never_worse_than_grid(rng):
    Y = (rng.random((30, 5)) < 0.3).astype(np.uint8)
    scores = rng.random((30, 5))
    for metric in METRIC_NAMES:
        t, value = ms.tune_threshold(Y, scores, metric)
        for g in ms.DEFAULT_GRID:
            assert value >= ms.evaluate(Y, ms.binarize(scores, g))[metric]


def test_tune_threshold_errors():
    with pytest.raises(ShapeError):
        ms.tune_threshold(np.zeros((0, 2)), np.zeros((0, 2)), "ebf1")
    with pytest.raises(ValueError):
        ms.tune_threshold(np.zeros((2, 2)), np.zeros((2, 2)), "hamming")


def test_metrics_csv_has_summary_and_auc_rows(tmp_path):
    Y = np.array([[1, 0, 1], [0, 1, 1], [1, 0, 0]])
    scores = np.array([[0.9, 0.2, 0.7], [0.3, 0.8, 0.6], [0.7, 0.1, 0.2]])
    report = ms.metrics_report(Y, scores, ms.tune_thresholds(Y, scores))
    path = ms.write_metrics_csv(report, tmp_path / "metrics.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,value,threshold"
    assert len(lines) == 1 + 4 + 3
    assert [line.split(",")[0] for line in lines[1:5]] == list(METRIC_NAMES)


def test_label_auc_csv(tmp_path):
    path = ms.write_label_auc_csv(np.array([0.5, np.nan]), [1, 0], [0, 2], tmp_path / "labels.csv")
    assert path.read_text().splitlines() == ["label,auc,degree_plus,degree_minus", "0,0.500000,1,0", "1,,0,2"]
