import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_thresholds, auc_pairs, macro_f1_counts, miou_sets
from mmim.metrics import (UndefinedMetricWarning, accuracy, aggregate_seeds, average_precision, macro_f1,
                          mean_average_precision, miou, multilabel_f1, roc_auc, roc_auc_ovr, roc_auc_trapezoid,
                          segmentation_iou)


def _binary_instance(rng):
    n = int(rng.integers(2, 12))
    labels = rng.integers(0, 2, n)
    labels[rng.choice(n, 2, replace=False)] = [0, 1]
    scores = rng.integers(0, 5, n) / 4.0 if rng.random() < 0.5 else rng.random(n)
    return labels, scores


def test_pinned_examples():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    assert abs(macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) - 0.7333) < 1e-4
    assert abs(macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) - (2 / 3 + 0.8) / 2) < 1e-15
    lab = [np.array([[1, 1], [0, 0]])]
    pred = [np.array([[0, 1], [0, 1]])]
    assert abs(segmentation_iou(lab, pred, [1]).miou - 1 / 3) < 1e-15
    assert average_precision([1, 0], [0.2, 0.9]) == 0.5


def test_trivial_cases():
    y = np.array([0, 1, 0, 1, 1])
    s = np.array([0.1, 0.8, 0.2, 0.7, 0.9])
    assert roc_auc(y, s) == 1.0
    assert average_precision(y, s) == 1.0
    assert abs(roc_auc(y, -s) - 0.0) < 1e-15
    assert macro_f1(y, y, 2) == 1.0
    assert accuracy(y, y) == 1.0
    m = np.array([[0, 1], [2, 1]])
    assert miou([m], [m], [0, 1, 2]) == 1.0
    assert segmentation_iou([np.array([[1, 0]])], [np.array([[0, 1]])], [1]).per_class == {1: 0.0}


def test_all_one_class_prediction():
    y = [0, 0, 1, 1]
    # class 1 F1 = 2*2/(4+2) and class 0 F1 = 0
    assert abs(macro_f1(y, [1, 1, 1, 1], 2) - (2 / 3 + 0) / 2) < 1e-15


def test_single_class_macro_f1_degenerates():
    assert macro_f1([0, 0, 0], [0, 0, 0], 1) == 1.0


def test_brute_force_oracles_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        y, s = _binary_instance(rng)
        assert abs(roc_auc(y, s) - auc_pairs(y.tolist(), s.tolist())) < 1e-10
        assert abs(average_precision(y, s) - ap_thresholds(y.tolist(), s.tolist())) < 1e-10
        k = int(rng.integers(2, 5))
        lab, pred = rng.integers(0, k, len(y)), rng.integers(0, k, len(y))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UndefinedMetricWarning)
            assert abs(macro_f1(lab, pred, k) - macro_f1_counts(lab.tolist(), pred.tolist(), k)) < 1e-10
        shape = tuple(rng.integers(1, 4, 2))
        lm = [rng.integers(0, 3, shape) for _ in range(2)]
        pm = [rng.integers(0, 3, shape) for _ in range(2)]
        assert abs(miou(lm, pm, [0, 1, 2]) - miou_sets([m.tolist() for m in lm], [m.tolist() for m in pm],
                                                        [0, 1, 2])) < 1e-10


def test_auc_equals_trapezoid():
    rng = np.random.default_rng(8)
    for _ in range(300):
        y, s = _binary_instance(rng)
        assert abs(roc_auc(y, s) - roc_auc_trapezoid(y, s)) < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    y, s = _binary_instance(rng)
    perm = rng.permutation(len(y))
    assert abs(roc_auc(y, s) - roc_auc(y[perm], s[perm])) < 1e-12
    assert abs(average_precision(y, s) - average_precision(y[perm], s[perm])) < 1e-12
    pred = (s > 0.5).astype(int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        assert macro_f1(y, pred, 2) == macro_f1(y[perm], pred[perm], 2)


def test_ap_random_scores_near_prevalence():
    rng = np.random.default_rng(9)
    aps = []
    for _ in range(10_000):
        y = rng.permutation(np.r_[np.ones(50, int), np.zeros(50, int)])
        aps.append(average_precision(y, rng.random(100)))
    assert abs(np.mean(aps) - 0.5) < 0.02


def test_auc_label_inversion():
    rng = np.random.default_rng(10)
    y, s = _binary_instance(rng)
    assert abs(roc_auc(1 - y, s) - (1 - roc_auc(y, s))) < 1e-12


def test_undefined_inputs():
    with pytest.raises(ValueError, match="only one class"):
        roc_auc([1, 1], [0.2, 0.3])
    with pytest.raises(ValueError, match="without positives"):
        average_precision([0, 0], [0.2, 0.3])
    with pytest.raises(ValueError, match="empty"):
        macro_f1([], [], 2)
    with pytest.raises(ValueError, match="shape mismatch"):
        segmentation_iou([np.zeros((2, 2))], [np.zeros((2, 3))], [0])
    with pytest.raises(ValueError, match="class ids"):
        macro_f1([0, 3], [0, 1], 2)
    with pytest.warns(UndefinedMetricWarning):
        assert macro_f1([0, 0], [0, 0], 2) == 0.5


def test_iou_reports_absent_classes():
    res = segmentation_iou([np.array([[0, 1]])], [np.array([[0, 1]])], [0, 1, 2])
    assert res.absent == [2] and res.miou == 1.0


def test_multilabel_and_map():
    y = np.array([[1, 0], [0, 1], [1, 1]])
    s = np.array([[2.0, -1.0], [-1.0, 0.5], [0.3, -0.2]])
    assert multilabel_f1(y, s > 0) == pytest.approx((1.0 + 2 / 3) / 2)
    assert mean_average_precision(y, s) == pytest.approx(np.mean([average_precision(y[:, k], s[:, k])
                                                                   for k in range(2)]))
    assert mean_average_precision(y, s, "micro") == average_precision(y.ravel(), s.ravel())
    assert roc_auc_ovr(np.array([0, 1, 2, 1]), np.eye(3)[[0, 1, 2, 1]]) == 1.0


def test_aggregate_uses_sample_std():
    recs = aggregate_seeds([{"acc": 0.8}, {"acc": 0.9}, {"acc": 1.0}])
    assert recs[0].mean == pytest.approx(0.9) and recs[0].std == pytest.approx(0.1) and recs[0].n_seeds == 3
