import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtl.metrics import confusion_matrix, depth_metrics, miou


def oracle_miou(pred, gt, k, ignore=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        if g != ignore:
            cm[g, p] += 1
    ious = []
    for c in range(k):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        if tp + fp + fn > 0:
            ious.append(tp / (tp + fp + fn))
    total = cm.sum()
    return float(np.mean(ious)) if ious else 0.0, (np.trace(cm) / total) if total else 0.0


def test_perfect():
    gt = np.random.default_rng(0).integers(0, 4, (8, 8))
    s = miou(gt, gt, 4)
    assert s.miou == 1.0 and s.accuracy == 1.0


def test_disjoint_class_iou_zero():
    gt = np.array([[1, 1, 0, 0]])
    pred = np.array([[0, 0, 1, 1]])
    assert miou(pred, gt, 2).per_class_iou[1] == 0.0


def test_hand_example():
    s = miou(np.array([[1, 0, 0, 0]]), np.array([[1, 1, 0, 0]]), 2)
    assert s.per_class_iou == [pytest.approx(2 / 3), pytest.approx(0.5)]
    assert s.miou == pytest.approx(7 / 12)
    assert s.accuracy == pytest.approx(0.75)


def test_absent_class_excluded_and_ignore():
    gt = np.array([[0, 0, 255, 1]])
    pred = np.array([[0, 0, 3, 1]])
    s = miou(pred, gt, 4)
    assert s.per_class_iou[2] is None and s.per_class_iou[3] is None
    assert s.miou == 1.0 and s.accuracy == 1.0


def test_errors():
    with pytest.raises(ValueError):
        miou(np.zeros(3, int), np.zeros(3, int), 0)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([4]), np.array([0]), 4)


def test_miou_matches_oracle_on_random_maps():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        gt = rng.integers(0, k, (6, 7))
        gt[rng.random((6, 7)) < 0.1] = 255
        pred = rng.integers(0, k, (6, 7))
        s = miou(pred, gt, k)
        m, acc = oracle_miou(pred, gt, k)
        assert abs(s.miou - m) <= 1e-12 and abs(s.accuracy - acc) <= 1e-12


def test_depth_identity():
    gt = np.random.default_rng(1).uniform(1, 10, (5, 5))
    d = depth_metrics(gt, gt)
    assert d.abs_rel == 0 and d.rmse_log == 0 and abs(d.silog) < 1e-15
    assert d.delta1 == d.delta2 == d.delta3 == 1.0


def test_depth_double():
    gt = np.random.default_rng(2).uniform(1, 10, (5, 5))
    d = depth_metrics(2 * gt, gt)
    assert d.rmse_log == pytest.approx(np.log(2))
    assert abs(d.silog) < 1e-12
    assert d.abs_rel == pytest.approx(1.0)


def test_depth_delta_strict():
    gt = np.full((3, 3), 2.0)
    d = depth_metrics(1.25 * gt, gt)
    assert d.delta1 == 0.0 and d.delta2 == 1.0 and d.delta3 == 1.0


def test_depth_rejects_non_positive():
    with pytest.raises(ValueError):
        depth_metrics(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_silog_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, (6, 6))
    pred = rng.uniform(0.5, 10, (6, 6))
    a, b = depth_metrics(pred, gt), depth_metrics(c * pred, gt)
    assert b.silog == pytest.approx(a.silog, rel=1e-9, abs=1e-12)
    for v in (a.delta1, a.delta2, a.delta3):
        assert 0 <= v <= 1
