import numpy as np
import pytest
import torch

from imlkit.backbone import stub_features
from imlkit.corrdino import correlation
from imlkit.errors import DataError, UntrainedModelError
from imlkit.images import ImageTensor, random_photo
from imlkit.pairs import (
    PairClassifier,
    PairGroup,
    PairSample,
    SpgAugmentConfig,
    classify_pair,
    route_pair,
    synthesize_sdg_pair,
    synthesize_spg_pair,
)
from imlkit.pipeline.training import TrainConfig, train

NO_AUG = SpgAugmentConfig(brightness=0, contrast=0, jpeg_quality=None, resize_jitter=0)
NO_RESIZE = SpgAugmentConfig(resize_jitter=0.0)


def test_spg_mask_matches_recorded_area(rng, photo):
    pair = synthesize_spg_pair(photo, rng, augment=NO_RESIZE)
    assert pair.group == PairGroup.SPG
    assert int(pair.gt_mask.sum()) == pair.provenance["area"]


def test_spg_difference_concentrates_on_mask(rng, photo):
    donor = random_photo(rng, 128, 128)
    pair = synthesize_spg_pair(photo, rng, donor=donor, augment=NO_RESIZE)
    diff = np.abs(pair.probe.data - pair.reference.data).mean(axis=0)
    noise_floor = 12.0 / 255.0
    strong = diff > noise_floor
    # oracle: pixels beyond the noise floor must live inside the mask
    if strong.any():
        overlap = (strong & pair.gt_mask.astype(bool)).sum() / strong.sum()
        assert overlap > 0.95


def test_spg_removal_locality(rng):
    img = random_photo(rng, 256, 256)
    for _ in range(10):
        pair = synthesize_spg_pair(img, rng, augment=NO_AUG)
        if pair.provenance["op"] == "removal":
            break
    outside = ~pair.gt_mask.astype(bool)
    assert np.array_equal(pair.probe.data[:, outside], pair.reference.data[:, outside])


def test_spg_rejects_small_images():
    tiny = ImageTensor(np.full((3, 32, 32), 0.5, np.float32))
    with pytest.raises(DataError):
        synthesize_spg_pair(tiny, np.random.default_rng(0))


def test_sdg_single_region_one_component(rng):
    donor = random_photo(rng, 128, 128)
    target = random_photo(rng, 128, 128)
    pair = synthesize_sdg_pair(donor, target, rng, n_regions=1)
    import cv2
    n, _ = cv2.connectedComponents(pair.gt_mask)
    assert n - 1 == 1


def test_sdg_three_regions_area_sums(rng):
    donor = random_photo(rng, 160, 160)
    target = random_photo(rng, 160, 160)
    pair = synthesize_sdg_pair(donor, target, rng, n_regions=3)
    # oracle: count from the recorded paste rectangles
    expected = sum(r["dst"][2] * r["dst"][3] for r in pair.provenance["regions"])
    assert int(pair.gt_mask.sum()) == expected


def test_sdg_planted_patch_correlation_peaks(rng):
    donor = random_photo(rng, 112, 112)
    target = random_photo(rng, 112, 112)
    pair = synthesize_sdg_pair(donor, target, rng, n_regions=1,
                               scale_range=(1.0, 1.0), align=14)
    region = pair.provenance["regions"][0]
    sy, sx, _, _ = region["src"]
    y, x, ph, pw = region["dst"]
    probe_stack = stub_features(pair.probe, seed=0)
    donor_stack = stub_features(pair.reference, seed=0)
    vol = correlation(probe_stack.layers[-1], donor_stack.layers[-1]).numpy()
    gw = probe_stack.grid[1]
    # oracle: brute-force cosine -> pasted token matches its donor token at 1.0
    ti, tj = y // 14, x // 14
    src_idx = (sy // 14) * gw + (sx // 14)
    assert vol[src_idx, ti, tj] == pytest.approx(1.0, abs=1e-6)
    assert vol[:, ti, tj].max() == pytest.approx(1.0, abs=1e-6)


def test_sdg_label_correctness(rng):
    donor = random_photo(rng, 96, 96)
    target = random_photo(rng, 96, 96)
    pair = synthesize_sdg_pair(donor, target, rng)
    assert pair.group == PairGroup.SDG
    assert pair.donor_mask is not None
    assert pair.gt_mask.shape == (96, 96)


def test_pair_sample_validates_mask():
    img = ImageTensor(np.full((3, 64, 64), 0.5, np.float32))
    with pytest.raises(DataError):
        PairSample(probe=img, reference=img, group="SPG",
                   gt_mask=np.zeros((32, 32), np.uint8))


def test_untrained_classifier_flags(photo):
    clf = PairClassifier(input_side=64)
    with pytest.raises(UntrainedModelError):
        classify_pair(photo, photo, clf)


def _quick_train_classifier(n_pairs=60, steps=60):
    rng = np.random.default_rng(5)
    torch.manual_seed(5)
    photos = [random_photo(rng, 96, 96) for _ in range(24)]
    pairs = []
    for i in range(n_pairs):
        a = photos[int(rng.integers(len(photos)))]
        b = photos[int(rng.integers(len(photos)))]
        if i % 2 == 0:
            pairs.append(synthesize_spg_pair(a, rng, donor=b))
        else:
            pairs.append(synthesize_sdg_pair(a, b, rng))
    clf = PairClassifier(input_side=64, widths=(8, 16, 32, 64))
    cfg = TrainConfig(iterations=steps, batch_size=16, input_side=96,
                      lr_start=2e-3, lr_end=1e-3, seed=0)
    train(clf, "classifier", [(pairs, 1.0)], cfg)
    return clf, pairs, rng


def test_classifier_trains_and_symmetry_is_exact():
    clf, pairs, rng = _quick_train_classifier()
    assert clf.trained
    pair = pairs[0]
    p = classify_pair(pair.probe, pair.reference, clf)
    p_swapped = classify_pair(pair.reference, pair.probe, clf)
    assert p == p_swapped  # averaging over both orderings is order-free
    assert (route_pair(pair.probe, pair.reference, clf)
            == route_pair(pair.reference, pair.probe, clf))


def test_classifier_separates_obvious_cases():
    clf, _, rng = _quick_train_classifier()
    img = random_photo(rng, 96, 96)
    other = random_photo(rng, 96, 96)
    assert classify_pair(img, img, clf) > 0.5  # bit-identical pair: SPG cue
    assert classify_pair(img, other, clf) < 0.5  # unrelated pair: SDG cue
