import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgesense.data import make_dataset, to_arrays
from edgesense.metrics import accuracy, class_iou, miou, predict_labels, task_metric


def _iou_by_counting(pred, gt, c):
    inter = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c and g == c)
    union = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c or g == c)
    return inter / union if union else None


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 3]])
    assert miou(gt, gt, 4) == 1.0


def test_hand_example():
    pred = np.array([0, 0, 1, 1])
    gt = np.array([0, 1, 1, 1])
    # class 0: 1/2, class 1: 2/3
    assert miou(pred, gt, 2) == pytest.approx((0.5 + 2 / 3) / 2)
    assert class_iou(pred, gt, 1) == pytest.approx(2 / 3)
    assert np.isnan(class_iou(pred, gt, 3))


@given(hnp.arrays(np.int64, 40, elements=st.integers(0, 3)), hnp.arrays(np.int64, 40, elements=st.integers(0, 3)))
def test_miou_matches_counting_oracle(pred, gt):
    ious = [v for v in (_iou_by_counting(pred, gt, c) for c in range(4)) if v is not None]
    assert miou(pred, gt, 4) == pytest.approx(np.mean(ious), abs=1e-12)


@given(hnp.arrays(np.int64, 30, elements=st.integers(0, 2)), hnp.arrays(np.int64, 30, elements=st.integers(0, 2)))
def test_miou_is_symmetric_and_bounded(pred, gt):
    v = miou(pred, gt, 3)
    assert 0.0 <= v <= 1.0 and v == pytest.approx(miou(gt, pred, 3))


def test_all_background_predictor():
    gt = to_arrays(make_dataset(64, 1, seed=2).train).seg
    bg_iou = np.mean(gt == 0)          # IoU of background when everything is predicted as background
    present = len(np.unique(gt))
    assert present == 4
    assert miou(np.zeros_like(gt), gt, 4) == pytest.approx(bg_iou / present, abs=1e-12)


def test_mismatched_shapes():
    with pytest.raises(ValueError):
        miou(np.zeros(3), np.zeros(4), 2)
    with pytest.raises(ValueError):
        accuracy([], [])


def test_accuracy():
    assert accuracy([1, 2, 0, 0], [1, 2, 2, 0]) == 0.75


def test_predict_labels_layouts():
    seg = np.zeros((2, 4, 3, 3))
    seg[:, 2] = 1.0
    assert np.all(predict_labels(seg, "segmentation") == 2)
    sal = np.array([[[[-1.0, 2.0]]]])
    assert predict_labels(sal, "saliency").tolist() == [[[0, 1]]]
    assert predict_labels(np.array([[0.1, 0.9, 0.0]]), "classification").tolist() == [1]
    with pytest.raises(ValueError):
        predict_labels(seg, "depth")


def test_task_metric_dispatch():
    gt = np.array([[0, 1], [1, 1]])
    assert task_metric(gt, gt, "saliency", 2) == 1.0
    assert task_metric(np.array([0, 1]), np.array([0, 0]), "classification", 3) == 0.5
    with pytest.raises(ValueError):
        task_metric(gt, gt, "depth", 2)
