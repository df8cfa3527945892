"""Detection loss functions and their analytic weight vectors."""

import numpy as np
import pytest

from latentpatch import (ConfigurationError, Detection, LossConfig,
                         common_detection_loss, detection_loss, iou,
                         iou_detection_loss)
from latentpatch.ido import (common_detection_loss_weights,
                             iou_detection_loss_weights)
from _oracles import oracle_common_loss, oracle_iou, oracle_iou_loss


def _det(box, p_obj, p_person, p_other=0.1):
    return Detection(box=box, p_obj=p_obj, p_cls=np.array([p_person, p_other]))


# ------------------------------------------------------------------- IoU

def test_iou_identical_boxes():
    assert iou((1, 2, 5, 7), (1, 2, 5, 7)) == 1.0


def test_iou_disjoint_boxes():
    assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0


def test_iou_hand_case_one_third():
    # overlap 2, union 6
    assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(1 / 3)


def test_iou_degenerate_box_is_zero():
    assert iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


def test_iou_symmetric_and_bounded_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = tuple(rng.uniform(0, 10, size=2)) + tuple(rng.uniform(0.5, 6, size=2))
        b = tuple(rng.uniform(0, 10, size=2)) + tuple(rng.uniform(0.5, 6, size=2))
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert v == pytest.approx(oracle_iou(a, b), abs=1e-12)


# --------------------------------------------------------- common loss

def test_common_loss_all_empty_batch():
    cfg = LossConfig(kind="common_detection")
    assert common_detection_loss([[], [], []], cfg) == 0.0


def test_common_loss_single_image_max():
    cfg = LossConfig(kind="common_detection")
    dets = [_det((0, 0, 4, 4), 0.4, 0.5),    # product 0.2
            _det((0, 0, 4, 4), 1.0, 0.7),    # product 0.7
            _det((0, 0, 4, 4), 0.5, 1.0)]    # product 0.5
    assert common_detection_loss([dets], cfg) == pytest.approx(0.7)


def test_common_loss_mean_of_maxima():
    cfg = LossConfig(kind="common_detection")
    a = [_det((0, 0, 4, 4), 1.0, 0.7)]
    b = [_det((0, 0, 4, 4), 0.5, 0.6)]
    assert common_detection_loss([a, b], cfg) == pytest.approx((0.7 + 0.3) / 2)


def test_common_loss_weights_select_the_argmax():
    cfg = LossConfig(kind="common_detection")
    a = [_det((0, 0, 4, 4), 0.4, 0.5), _det((0, 0, 4, 4), 1.0, 0.7)]
    b = []
    w = common_detection_loss_weights([a, b], cfg)
    assert w == [[0.0, 0.5], []]


def test_common_loss_rejects_empty_batch():
    with pytest.raises(ConfigurationError):
        common_detection_loss([], LossConfig(kind="common_detection"))


# ------------------------------------------------------ iou-filtered loss

def test_iou_loss_nothing_kept_when_no_overlap():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    dets = [_det((0, 0, 4, 4), 0.9, 0.9)]
    gts = [[(20, 20, 4, 4)]]
    assert iou_detection_loss([dets], gts, cfg) == 0.0


def test_iou_loss_filters_on_overlap():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    # first box IoU 0.8-ish with gt, second way off
    gt = (0, 0, 10, 10)
    d1 = _det((0, 0, 10, 8), 1.0, 0.6)    # IoU 0.8 -> kept
    d2 = _det((30, 30, 10, 10), 1.0, 0.9)  # IoU 0  -> dropped
    assert iou_detection_loss([[d1, d2]], [[gt]], cfg) == pytest.approx(0.6)


def test_iou_loss_averages_kept_scores():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    gt = (0, 0, 10, 10)
    d1 = _det((0, 0, 10, 9), 1.0, 0.6)
    d2 = _det((0, 0, 9, 10), 1.0, 0.4)
    assert iou_detection_loss([[d1, d2]], [[gt]], cfg) == pytest.approx(0.5)


def test_iou_loss_threshold_is_strict():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    gt = (0, 0, 10, 10)
    exactly_half = _det((0, 0, 10, 5), 1.0, 0.8)  # IoU exactly 0.5
    assert iou((0, 0, 10, 5), gt) == pytest.approx(0.5)
    assert iou_detection_loss([[exactly_half]], [[gt]], cfg) == 0.0


def test_iou_loss_empty_image_contributes_zero():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    gt = (0, 0, 10, 10)
    kept = _det((0, 0, 10, 9), 1.0, 0.8)
    loss = iou_detection_loss([[kept], []], [[gt], [gt]], cfg)
    assert loss == pytest.approx(0.8 / 2)


def test_iou_loss_mismatched_lengths_rejected():
    cfg = LossConfig(kind="iou_detection")
    with pytest.raises(ConfigurationError):
        iou_detection_loss([[]], [[(0, 0, 1, 1)], [(0, 0, 1, 1)]], cfg)


def test_iou_loss_weights_uniform_over_kept():
    cfg = LossConfig(kind="iou_detection", iou_threshold=0.5)
    gt = (0, 0, 10, 10)
    d1 = _det((0, 0, 10, 9), 1.0, 0.6)
    d2 = _det((0, 0, 9, 10), 1.0, 0.4)
    d3 = _det((40, 40, 5, 5), 1.0, 0.9)
    w = iou_detection_loss_weights([[d1, d2, d3]], [[gt]], cfg)
    assert w == [[0.5, 0.5, 0.0]]


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(kind="focal")
    with pytest.raises(ConfigurationError):
        LossConfig(iou_threshold=0.0)
    with pytest.raises(ConfigurationError):
        LossConfig(target_class=-1)


# ------------------------------------------------- randomized oracle sweep

def _random_instance(rng):
    """A small batch of detections plus ground-truth boxes."""
    n_images = int(rng.integers(1, 5))
    batch, gts = [], []
    for _ in range(n_images):
        dets = []
        for _ in range(int(rng.integers(0, 9))):
            box = (float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
                   float(rng.uniform(1, 10)), float(rng.uniform(1, 10)))
            dets.append(Detection(box=box, p_obj=float(rng.uniform()),
                                  p_cls=rng.uniform(size=3)))
        boxes = [(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
                  float(rng.uniform(1, 10)), float(rng.uniform(1, 10)))
                 for _ in range(int(rng.integers(0, 4)))]
        batch.append(dets)
        gts.append(boxes)
    return batch, gts


def _as_tuples(batch):
    return [[(d.box, d.p_obj, list(d.p_cls)) for d in dets] for dets in batch]


def test_losses_match_brute_force_oracles_randomized():
    rng = np.random.default_rng(2024)
    for trial in range(40):
        batch, gts = _random_instance(rng)
        target = int(rng.integers(0, 3))
        thr = float(rng.uniform(0.2, 0.8))
        cfg_c = LossConfig(kind="common_detection", target_class=target)
        cfg_i = LossConfig(kind="iou_detection", iou_threshold=thr, target_class=target)
        raw = _as_tuples(batch)
        assert common_detection_loss(batch, cfg_c) == pytest.approx(
            oracle_common_loss(raw, target), abs=1e-12), f"common trial {trial}"
        assert iou_detection_loss(batch, gts, cfg_i) == pytest.approx(
            oracle_iou_loss(raw, gts, thr, target), abs=1e-12), f"iou trial {trial}"


def test_weights_are_the_loss_gradient():
    """Perturbing one detection's objectness moves the loss by w * p_cls."""
    rng = np.random.default_rng(77)
    for kind in ("common_detection", "iou_detection"):
        for _ in range(10):
            batch, gts = _random_instance(rng)
            if not any(batch):
                continue
            cfg = LossConfig(kind=kind, iou_threshold=0.5, target_class=0)
            if kind == "common_detection":
                weights = common_detection_loss_weights(batch, cfg)
            else:
                weights = iou_detection_loss_weights(batch, gts, cfg)
            base = detection_loss(batch, gts, cfg)
            h = 1e-7
            for i, dets in enumerate(batch):
                for k, d in enumerate(dets):
                    if d.p_obj + h > 1.0:
                        continue
                    bumped = [list(img) for img in batch]
                    bumped[i][k] = Detection(box=d.box, p_obj=d.p_obj + h, p_cls=d.p_cls)
                    fd = (detection_loss(bumped, gts, cfg) - base) / h
                    want = weights[i][k] * float(d.p_cls[0])
                    # ties in the max make the fd one-sided; tolerate those
                    if abs(fd - want) > 1e-5:
                        assert fd >= want - 1e-5
