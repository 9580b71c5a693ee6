import numpy as np
import pytest

from imlkit.errors import DataError
from imlkit.images import (
    ImageTensor,
    jpeg_roundtrip_chw,
    load_mask_png,
    random_photo,
    save_mask_png,
)


def test_image_tensor_validates_shape():
    with pytest.raises(DataError):
        ImageTensor(np.zeros((1, 64, 64), dtype=np.float32))
    with pytest.raises(DataError):
        ImageTensor(np.zeros((3, 16, 64), dtype=np.float32))


def test_image_tensor_validates_range():
    bad = np.full((3, 64, 64), 1.5, dtype=np.float32)
    with pytest.raises(DataError):
        ImageTensor(bad)
    bad[:] = np.nan
    with pytest.raises(DataError):
        ImageTensor(bad)


def test_uint8_roundtrip(photo):
    back = ImageTensor.from_hwc_uint8(photo.to_hwc_uint8())
    assert np.abs(back.data - photo.data).max() <= 0.5 / 255.0 + 1e-6


def test_png_roundtrip(tmp_path, photo):
    path = tmp_path / "img.png"
    photo.save(path)
    loaded = ImageTensor.load(path)
    assert np.array_equal(loaded.to_hwc_uint8(), photo.to_hwc_uint8())


def test_mask_png_roundtrip(tmp_path, rng):
    mask = rng.uniform(0, 1, size=(40, 52)).astype(np.float32)
    path = tmp_path / "mask.png"
    save_mask_png(mask, path)
    loaded = load_mask_png(path)
    assert np.abs(loaded - mask).max() <= 0.5 / 255.0 + 1e-6


def test_jpeg_roundtrip_changes_little_at_high_quality(photo):
    out = jpeg_roundtrip_chw(photo.data, 95)
    assert out.shape == photo.data.shape
    assert np.abs(out - photo.data).mean() < 4.0 / 255.0


def test_random_photo_deterministic():
    a = random_photo(np.random.default_rng(7), 96, 112)
    b = random_photo(np.random.default_rng(7), 96, 112)
    assert np.array_equal(a.data, b.data)
    assert (a.height, a.width) == (96, 112)


def test_random_photo_labels_mark_shapes():
    img, labels = random_photo(np.random.default_rng(9), 128, 128, with_labels=True)
    assert labels.shape == (128, 128)
    assert labels.max() >= 1
