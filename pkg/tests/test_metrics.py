import numpy as np
import pytest

from api_models import DatasetPooling
from errors import DimensionError, InputError
from metrics import (
    MetricsReport, ber, confusion, evaluate_dataset, f_beta, image_metrics, iou, mae,
)


def square(size=8, y=2, x=2, edge=2):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y:y + edge, x:x + edge] = 1
    return mask


def test_iou_limit_cases():
    gt = square()
    assert iou(gt, gt) == 1.0
    assert iou(square(y=0, x=0), square(y=5, x=5)) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_half_covered_square():
    gt = square()
    pred = np.zeros_like(gt)
    pred[2, 2:4] = 1
    assert iou(pred, gt) == 0.5


def test_iou_is_symmetric_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random((8, 8)) < 0.4
        b = rng.random((8, 8)) < 0.4
        assert iou(a, b) == iou(b, a)
        missed = np.argwhere(b & ~a)
        if len(missed):
            grown = a.copy()
            grown[tuple(missed[0])] = True
            assert iou(grown, b) > iou(a, b)


def test_f_beta_examples():
    gt = square()
    assert f_beta(gt.astype(float), gt) == 1.0
    # P = 0.5, R = 1.0
    pred = np.zeros((8, 8))
    pred[2:4, 2:6] = 0.8
    assert f_beta(pred, gt) == pytest.approx(1.3 * 0.5 / (0.15 + 1.0))
    assert f_beta(np.zeros((8, 8)), gt) == 0.0


def test_f_beta_threshold_is_inclusive():
    gt = square()
    assert f_beta(gt * 0.5, gt) == 1.0


def test_f_beta_rejects_out_of_range_probabilities():
    with pytest.raises(InputError):
        f_beta(np.full((4, 4), 1.5), np.zeros((4, 4)))


def test_mae_examples():
    gt = square()
    assert mae(gt.astype(float), gt) == 0.0
    assert mae(1.0 - gt, gt) == 1.0
    assert mae(np.full((8, 8), 0.5), gt) == 0.5


def test_ber_examples():
    gt = square()
    assert ber(gt, gt) == 0.0
    assert ber(np.ones_like(gt), gt) == 50.0
    assert ber(np.zeros_like(gt), gt) == 50.0


def test_ber_with_single_class_ground_truth_uses_the_defined_term():
    gt = np.zeros((4, 4), dtype=np.uint8)
    assert ber(np.zeros_like(gt), gt) == 0.0
    pred = np.zeros_like(gt)
    pred[:2] = 1
    assert ber(pred, gt) == 50.0


def test_ber_is_invariant_under_complement():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pred = rng.random((8, 8)) < 0.5
        gt = rng.random((8, 8)) < 0.5
        assert ber(pred, gt) == pytest.approx(ber(~pred, ~gt))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        iou(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        mae(np.zeros((4, 4)), np.zeros((5, 4)))


def oracle(prob: np.ndarray, gt: np.ndarray):
    tp = fp = fn = tn = 0
    abs_error = 0.0
    for p, g in zip(prob.ravel().tolist(), gt.ravel().tolist()):
        predicted = p >= 0.5
        abs_error += abs(p - g)
        if predicted and g:
            tp += 1
        elif predicted:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    iou_value = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    if tp + fp + fn == 0:
        f_value = 1.0
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f_value = 1.3 * precision * recall / (0.3 * precision + recall) if 0.3 * precision + recall else 0.0
    recalls = []
    if tp + fn:
        recalls.append(tp / (tp + fn))
    if tn + fp:
        recalls.append(tn / (tn + fp))
    ber_value = 100 * (1 - sum(recalls) / len(recalls))
    return iou_value, f_value, abs_error / prob.size, ber_value


def test_metrics_match_confusion_matrix_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        prob = rng.random((8, 8)) * rng.choice([0.0, 0.6, 1.0])
        gt = (rng.random((8, 8)) < rng.choice([0.0, 0.2, 0.5, 1.0])).astype(np.uint8)
        m = image_metrics(prob, gt)
        expected = oracle(prob, gt)
        assert m.iou == pytest.approx(expected[0], abs=1e-9)
        assert m.f_beta == pytest.approx(expected[1], abs=1e-9)
        assert m.mae == pytest.approx(expected[2], abs=1e-9)
        assert m.ber == pytest.approx(expected[3], abs=1e-9)
        assert 0.0 <= m.f_beta <= 1.0 and 0.0 <= m.mae <= 1.0 and 0.0 <= m.ber <= 100.0


def test_confusion_counts_add_up():
    c = confusion(square(), square(y=3))
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 2, 2, 58)


def test_single_perfect_image():
    gt = square()
    report = evaluate_dataset([gt.astype(float)], [gt])
    assert report.summary() == {"iou": 1.0, "f_beta": 1.0, "mae": 0.0, "ber": 0.0}
    assert report.num_images == 1


def test_dataset_value_is_the_mean_of_images():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[0, :] = 1
    gt[1, 0] = 1
    first = np.zeros((4, 4))
    first[0, :2] = 1
    second = np.zeros((4, 4))
    second[0, :3] = 1
    assert iou(first >= 0.5, gt) == pytest.approx(0.4)
    assert iou(second >= 0.5, gt) == pytest.approx(0.6)
    assert evaluate_dataset([first, second], [gt, gt]).iou == pytest.approx(0.5)


def test_pooled_aggregation_sums_counts():
    gt_a = np.zeros((4, 4), dtype=np.uint8)
    gt_a[0, :] = 1
    gt_b = np.zeros((4, 4), dtype=np.uint8)
    gt_b[:, 0] = 1
    pred_a = gt_a.astype(float)
    pred_b = np.zeros((4, 4))
    report = evaluate_dataset([pred_a, pred_b], [gt_a, gt_b], pooling=DatasetPooling.POOLED)
    # tp 4, fn 4, fp 0
    assert report.iou == pytest.approx(0.5)
    assert report.mae == pytest.approx(4 / 32)
    assert report.pooling == DatasetPooling.POOLED


def test_dataset_errors():
    with pytest.raises(DimensionError):
        evaluate_dataset([np.zeros((2, 2))], [])
    with pytest.raises(InputError):
        evaluate_dataset([], [])


def test_table_rows():
    row = MetricsReport(iou=0.770, f_beta=0.865, mae=0.032, ber=8.21).table_row("GEM-Tiny")
    assert row == "GEM-Tiny | 0.770 | 0.865 | 0.032 | 8.21"
    row = MetricsReport(iou=0.703, f_beta=0.819, mae=0.215, ber=10.79).table_row("S-GSD-1x")
    assert row == "S-GSD-1x | 0.703 | 0.819 | 0.215 | 10.79"
