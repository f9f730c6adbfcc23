import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sraa.errors import LabelError, ShapeError
from sraa.evaluation import (
    SUMMARY_COLUMNS,
    MetricsReport,
    aliasing_matrix,
    confusion_matrix,
    evaluate,
    harmonic_mean,
    iou,
    mean_iou,
    read_reports,
    write_reports,
    write_summary,
)

labels = arrays(np.int64, (3, 4), elements=st.integers(0, 4))


def test_iou_examples():
    gt = np.array([[0, 1, 1], [1, 1, 0]])
    assert iou(gt, gt, 1) == 1.0
    assert iou(np.where(gt == 1, 0, 2), gt, 1) == 0.0
    assert iou(gt, gt, 3) is None


def test_iou_half_band():
    gt = np.zeros((4, 8), int)
    gt[1:3, :] = 1              # full-width band
    pred = np.zeros_like(gt)
    pred[1:3, :4] = 1           # left half of it
    assert iou(pred, gt, 1) == 0.5


def test_iou_shape_mismatch():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)), 0)


def test_harmonic_mean_paper_rows():
    assert round(harmonic_mean(65.2, 19.1), 1) == 29.5
    assert round(harmonic_mean(63.8, 36.7), 1) == 46.6


def test_harmonic_mean_identities():
    assert harmonic_mean(50, 50) == 50
    assert harmonic_mean(0, 40) == 0 and harmonic_mean(40, 0) == 0


@given(st.floats(0.001, 1), st.floats(0.001, 1))
def test_harmonic_mean_below_arithmetic(b, n):
    h = harmonic_mean(b, n)
    assert h <= (b + n) / 2 + 1e-15
    if b != n:
        assert h < (b + n) / 2


def test_mean_iou_skips_undefined():
    assert mean_iou({1: 0.5, 2: None, 3: 1.0}, [1, 2, 3]) == 0.75
    assert mean_iou({}, [1]) == 0.0


def test_aliasing_examples():
    gt = np.array([[0, 1, 1, 3], [2, 2, 3, 0]])
    perfect = aliasing_matrix(gt, gt, [0, 1, 2, 3], [1, 2], [3])
    assert np.array_equal(perfect.confusion, np.diag(np.diag(perfect.confusion)))
    assert perfect.base_to_novel == perfect.novel_to_base == 0.0
    pred = np.where(gt == 1, 3, gt)
    a = aliasing_matrix(pred, gt, [0, 1, 2, 3], [1, 2], [3])
    assert a.per_class[1] == 1.0 and a.per_class[2] == 0.0
    assert a.base_to_novel == 0.5


@given(labels, labels)
def test_confusion_tally_and_totals(pred, gt):
    classes = [0, 1, 2, 3, 4]
    conf = confusion_matrix(pred, gt, classes)
    tally = {}
    for p, g in zip(pred.ravel(), gt.ravel()):
        tally[(g, p)] = tally.get((g, p), 0) + 1
    assert all(conf[a, b] == tally.get((a, b), 0) for a in classes for b in classes)
    assert conf.sum() == gt.size
    assert conf.sum(axis=1).tolist() == [int((gt == c).sum()) for c in classes]


def test_confusion_rejects_unknown_labels():
    with pytest.raises(LabelError):
        confusion_matrix(np.array([[0, 7]]), np.array([[0, 1]]), [0, 1])


@given(arrays(np.int64, (4, 3, 3), elements=st.integers(0, 3)),
       arrays(np.int64, (4, 3, 3), elements=st.integers(0, 3)), st.permutations(range(4)))
def test_miou_invariant_to_image_order(pred, gt, perm):
    a = evaluate(pred, gt, [0, 1, 2, 3], [1, 2], [3])
    b = evaluate(pred[list(perm)], gt[list(perm)], [0, 1, 2, 3], [1, 2], [3])
    assert (a.miou_base, a.miou_novel) == (b.miou_base, b.miou_novel)


@given(labels, labels)
def test_report_hm_recomputes(pred, gt):
    r = evaluate(pred, gt, [0, 1, 2, 3, 4], [1, 2], [3, 4])
    assert abs(r.hm - harmonic_mean(r.miou_base, r.miou_novel)) <= 1e-12


def test_background_only_in_confusion():
    gt = np.array([[0, 0, 1, 2]])
    pred = np.array([[1, 0, 1, 2]])
    r = evaluate(pred, gt, [0, 1, 2], [0, 1], [2])
    assert r.miou_base == 0.5          # class 1 only
    assert r.miou_novel == 1.0
    assert r.confusion[0].tolist() == [1, 1, 0]


def test_reports_roundtrip_and_summary(tmp_path):
    gt = np.array([[0, 1, 2, 2]])
    r = evaluate(gt, gt, [0, 1, 2], [1], [2], step_index=2, context={"fold": 1, "method": "sraa"})
    write_reports([r, r], tmp_path / "r.jsonl")
    back = read_reports(tmp_path / "r.jsonl")
    assert len(back) == 2 and isinstance(back[0], MetricsReport)
    assert back[0].to_record() == r.to_record()
    write_reports(back, tmp_path / "s.jsonl")
    assert (tmp_path / "r.jsonl").read_bytes() == (tmp_path / "s.jsonl").read_bytes()
    write_summary([{"fold": 1, "shots": 5, "protocol": "multi", "miou_base": 0.5,
                    "miou_novel": 0.25, "hm": 1 / 3}], tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SUMMARY_COLUMNS)
    assert lines[1] == "1,5,multi,0.500000,0.250000,0.333333"
