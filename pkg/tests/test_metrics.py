import warnings

import numpy as np
import pytest

from maskprop.datamodel import ModelConfig, SemanticMap
from maskprop.metrics import (
    CostReport,
    conv_flops,
    confusion_accumulate,
    estimate_flops,
    evaluate,
    metrics_csv,
    miou,
    mvc,
    per_class_iou,
    video_consistency,
    wiou,
)


def half_overlap_case():
    """Class 1: 100 GT pixels, prediction hits 50 of them plus 50 background pixels."""
    gt = np.zeros((10, 20), np.uint8)
    gt[:, 10:] = 1
    pred = gt.copy()
    pred[:5, 10:] = 0
    pred[:5, :10] = 1
    return pred, gt


class TestConfusion:
    def test_hand_case(self):
        pred = np.array([[1, 0], [1, 1]], np.uint8)
        gt = np.array([[1, 1], [0, 255]], np.uint8)
        conf = confusion_accumulate(pred, gt, 2)
        np.testing.assert_array_equal(conf, [[0, 1], [1, 1]])

    def test_perfect_is_diagonal(self):
        gt = np.random.default_rng(0).integers(0, 4, size=(8, 8)).astype(np.uint8)
        conf = confusion_accumulate(SemanticMap(gt, 4), gt, 4)
        assert np.count_nonzero(conf - np.diag(np.diag(conf))) == 0

    def test_all_ignore(self):
        conf = confusion_accumulate(np.zeros((4, 4), np.uint8), np.full((4, 4), 255, np.uint8), 3)
        assert conf.sum() == 0
        with pytest.raises(ValueError):
            miou(conf)


class TestIoU:
    def test_one_third(self):
        conf = confusion_accumulate(*half_overlap_case(), 2)
        assert per_class_iou(conf)[1] == pytest.approx(1 / 3)
        assert miou(conf) == pytest.approx(1 / 3)

    def test_disjoint(self):
        gt = np.array([[0, 1]], np.uint8)
        assert miou(confusion_accumulate(1 - gt, gt, 2)) == 0.0

    def test_absent_class_excluded(self):
        gt = np.zeros((2, 2), np.uint8)
        conf = confusion_accumulate(gt, gt, 3)
        assert per_class_iou(conf) == [1.0, None, None]
        assert miou(conf) == 1.0

    def test_wiou_three_to_one(self):
        gt = np.zeros((4, 100), np.uint8)
        gt[3] = 1
        pred = np.zeros_like(gt)
        conf = confusion_accumulate(pred, gt, 2)
        assert wiou(conf) == pytest.approx(0.75 * 0.75)
        assert miou(conf) == pytest.approx(0.375)

    def test_wiou_single_class(self):
        gt = np.zeros((1, 4), np.uint8)
        pred = np.array([[0, 0, 1, 1]], np.uint8)
        conf = confusion_accumulate(pred, gt, 2)
        assert wiou(conf) == per_class_iou(conf)[0] == 0.5

    def test_relabel_invariance(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, size=(6, 6)).astype(np.uint8)
        pred = rng.integers(0, 3, size=(6, 6)).astype(np.uint8)
        perm = np.array([2, 0, 1], np.uint8)
        a = confusion_accumulate(pred, gt, 3)
        b = confusion_accumulate(perm[pred], perm[gt], 3)
        assert miou(a) == pytest.approx(miou(b)) and wiou(a) == pytest.approx(wiou(b))


class TestVideoConsistency:
    def test_hand_case(self):
        gt = [np.zeros((2, 1), np.uint8)] * 3
        pred = [np.zeros((2, 1), np.uint8), np.zeros((2, 1), np.uint8), np.ones((2, 1), np.uint8)]
        assert video_consistency(pred, gt, 2) == 0.5

    def test_perfect(self):
        gt = list(np.random.default_rng(2).integers(0, 3, size=(5, 4, 4)).astype(np.uint8))
        assert video_consistency(gt, gt, 3) == 1.0

    def test_all_windows_empty(self):
        gt = [np.full((2, 2), t % 2, np.uint8) for t in range(4)]
        assert video_consistency(gt, gt, 2) is None
        assert mvc([(gt, gt)], 2) is None

    def test_short_clip_warns(self):
        gt = [np.zeros((2, 2), np.uint8)] * 3
        with pytest.warns(UserWarning):
            assert video_consistency(gt, gt, 8) is None

    def test_report_absent(self):
        gt = [np.zeros((2, 2), np.uint8)] * 3
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            d = evaluate([(gt, gt)], 2).to_dict()
        assert d["miou"] == d["wiou"] == 1.0
        assert d["mvc8"] == "absent" and d["per_class_iou"][1] == "absent"


class TestFlops:
    def test_conv_formula(self):
        assert conv_flops(3, 3, 8, 32, 32) == 442_368

    def test_nonkey_independent_of_backbone(self):
        a = ModelConfig()
        b = a.replace(backbone_widths=(16, 32, 48, 64), backbone_stem=8)
        for v in ModelConfig.VARIANTS:
            assert estimate_flops(a.replace(flow_variant=v), 64, 64, "nonkey").total == \
                estimate_flops(b.replace(flow_variant=v), 64, 64, "nonkey").total
        assert estimate_flops(a, 64, 64, "key").total != estimate_flops(b, 64, 64, "key").total

    def test_copy_and_perframe(self):
        cfg = ModelConfig()
        copy = estimate_flops(cfg, 64, 64, "nonkey", mode="copy")
        assert set(copy.breakdown) == {"composition"}
        assert estimate_flops(cfg, 64, 64, "nonkey", mode="perframe").total == estimate_flops(cfg, 64, 64, "key").total

    def test_accounting_identity(self):
        cfg = ModelConfig()
        key, nonkey = estimate_flops(cfg, 64, 64, "key"), estimate_flops(cfg, 64, 64, "nonkey")
        roles = ["key" if t % 5 == 0 else "nonkey" for t in range(15)]
        rep = CostReport.from_roles(roles, key, nonkey)
        assert rep.total == 3 * key.total + 12 * nonkey.total
        assert rep.mean_per_frame == (3 * key.total + 12 * nonkey.total) / 15

    def test_bad_role(self):
        with pytest.raises(ValueError):
            estimate_flops(ModelConfig(), 64, 64, "middle")


def test_csv_columns():
    text = metrics_csv([{"mode": "copy", "interval": 2, "miou": 0.5, "wiou": 0.6,
                         "mvc8": 0.7, "mvc16": None, "gflops": 0.01}])
    assert text.splitlines()[0] == "mode,interval,miou,wiou,mvc8,mvc16,gflops"
