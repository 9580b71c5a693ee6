import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imlkit.errors import DataError
from imlkit.images import random_photo
from imlkit.metrics import binarize, f1, iou, perturb, pixel_auc

from .helpers import brute_force_auc


def test_binarize_strict():
    half = np.full((4, 4), 0.5, dtype=np.float32)
    assert binarize(half, 0.5).sum() == 0
    assert binarize(np.full((4, 4), 0.51, np.float32), 0.5).sum() == 16


def test_binarize_idempotent(rng):
    m = rng.uniform(0, 1, size=(16, 16)).astype(np.float32)
    once = binarize(m)
    assert np.array_equal(binarize(once.astype(np.float32)), once)


def test_iou_f1_hand_cases():
    gt = np.zeros((20, 20), np.uint8)
    gt[:10, :10] = 1  # area 100
    pred = np.zeros((20, 20), np.uint8)
    pred[:10, :5] = 1  # 50 pixels fully inside gt
    # oracle: direct set counting -> IoU 50/100, F1 2*50/150
    assert iou(pred, gt) == pytest.approx(0.5)
    assert f1(pred, gt) == pytest.approx(100.0 / 150.0, abs=1e-12)
    assert iou(gt, gt) == 1.0 and f1(gt, gt) == 1.0
    disjoint = np.zeros_like(gt)
    disjoint[15:, 15:] = 1
    assert iou(pred, disjoint) == 0.0 and f1(pred, disjoint) == 0.0


def test_iou_f1_both_empty_convention():
    empty = np.zeros((8, 8), np.uint8)
    assert iou(empty, empty) == 1.0
    assert f1(empty, empty) == 1.0


def test_iou_f1_symmetry_and_identity(rng):
    for _ in range(50):
        a = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        b = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        assert iou(a, b) == iou(b, a)
        assert f1(a, b) == f1(b, a)
        if np.logical_or(a, b).any():
            i = iou(a, b)
            assert f1(a, b) == pytest.approx(2.0 * i / (1.0 + i), abs=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(DataError):
        iou(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))


def test_auc_hand_case():
    gt = np.array([[1, 1], [0, 0]], np.uint8)
    pred = np.array([[0.9, 0.4], [0.6, 0.1]], np.float32)
    # oracle: 3 of the 4 (forged, authentic) pairs correctly ordered
    assert pixel_auc(pred, gt) == pytest.approx(0.75)


def test_auc_perfect_and_chance(rng):
    gt = (rng.random((10, 10)) < 0.3).astype(np.uint8)
    gt[0, 0] = 1
    gt[-1, -1] = 0
    perfect = gt.astype(np.float32) * 0.5 + 0.25
    assert pixel_auc(perfect, gt) == pytest.approx(1.0)
    assert pixel_auc(np.full((10, 10), 0.5, np.float32), gt) == pytest.approx(0.5)


def test_auc_single_class_flagged():
    with pytest.raises(DataError):
        pixel_auc(np.full((4, 4), 0.5, np.float32), np.zeros((4, 4), np.uint8))


def test_auc_matches_brute_force(rng):
    for _ in range(20):
        gt = (rng.random((6, 6)) < 0.5).astype(np.uint8)
        if gt.sum() in (0, gt.size):
            continue
        pred = np.round(rng.random((6, 6)), 1).astype(np.float32)  # force ties
        assert pixel_auc(pred, gt) == pytest.approx(brute_force_auc(pred, gt), abs=1e-12)


def test_auc_monotone_transform_invariant(rng):
    gt = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    gt[0, 0], gt[1, 1] = 1, 0
    pred = rng.random((8, 8)).astype(np.float32)
    transformed = (np.tanh(3.0 * pred) * 0.5 + 0.5).astype(np.float32)
    assert pixel_auc(pred, gt) == pytest.approx(pixel_auc(transformed, gt), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_f1_iou_identity_property(seed):
    r = np.random.default_rng(seed)
    a = (r.random((10, 10)) < r.uniform(0.1, 0.9)).astype(np.uint8)
    b = (r.random((10, 10)) < r.uniform(0.1, 0.9)).astype(np.uint8)
    if not np.logical_or(a, b).any():
        return
    i = iou(a, b)
    assert abs(f1(a, b) - 2.0 * i / (1.0 + i)) < 1e-12


def test_perturb_resize():
    img = random_photo(np.random.default_rng(0), 512, 512)
    out = perturb(img, "resize", 0.25)
    assert (out.height, out.width) == (128, 128)


def test_perturb_blur_constant_identity():
    from imlkit.images import ImageTensor
    img = ImageTensor(np.full((3, 64, 64), 0.25, dtype=np.float32))
    out = perturb(img, "blur", 3)
    assert np.abs(out.data - img.data).max() < 1e-6


def test_perturb_jpeg_q100_near_identity():
    img = random_photo(np.random.default_rng(1), 128, 128)
    out = perturb(img, "jpeg", 100)
    # oracle: encode/decode measurement
    assert np.abs(out.data - img.data).mean() < 2.0 / 255.0


def test_perturb_illegal_params(photo):
    with pytest.raises(DataError):
        perturb(photo, "resize", 1.5)
    with pytest.raises(DataError):
        perturb(photo, "blur", 4)
    with pytest.raises(DataError):
        perturb(photo, "jpeg", 0)
    with pytest.raises(DataError):
        perturb(photo, "sharpen", 1)
