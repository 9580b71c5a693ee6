"""Image container and pixel-level primitives shared across the toolkit.

Images travel as float32 arrays of shape (3, H, W) with values in [0, 1],
wrapped in :class:`ImageTensor` at public boundaries. Binary masks are
(H, W) uint8 arrays with values in {0, 1}; probability masks are (H, W)
float arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError

MIN_SIDE = 32


@dataclass(frozen=True)
class ImageTensor:
    """A normalized RGB image: (3, H, W) float32, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataError(f"expected (3, H, W), got shape {arr.shape}")
        if arr.shape[1] < MIN_SIDE or arr.shape[2] < MIN_SIDE:
            raise DataError(f"image sides must be >= {MIN_SIDE}, got {arr.shape[1:]}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise DataError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_hwc_uint8(cls, arr: np.ndarray) -> "ImageTensor":
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise DataError(f"expected (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
        return cls(arr.astype(np.float32).transpose(2, 0, 1) / 255.0)

    def to_hwc_uint8(self) -> np.ndarray:
        return np.rint(self.data * 255.0).astype(np.uint8).transpose(1, 2, 0)

    @classmethod
    def load(cls, path: str | Path) -> "ImageTensor":
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DataError(f"cannot read image: {path}")
        return cls.from_hwc_uint8(bgr[:, :, ::-1].copy())

    def save(self, path: str | Path) -> None:
        bgr = self.to_hwc_uint8()[:, :, ::-1]
        if not cv2.imwrite(str(path), bgr):
            raise DataError(f"cannot write image: {path}")


def to_hwc(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def to_chw(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def resize_chw(arr: np.ndarray, height: int, width: int, interpolation=cv2.INTER_LINEAR) -> np.ndarray:
    """Resize a (C, H, W) float array with an OpenCV interpolation mode."""
    out = cv2.resize(to_hwc(arr), (width, height), interpolation=interpolation)
    if out.ndim == 2:
        out = out[:, :, None]
    return to_chw(out)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize preserving {0, 1} values."""
    return cv2.resize(mask.astype(np.uint8), (width, height), interpolation=cv2.INTER_NEAREST)


def jpeg_roundtrip_chw(arr: np.ndarray, quality: int) -> np.ndarray:
    """Encode/decode a (3, H, W) float image as JPEG at the given quality."""
    if not 1 <= int(quality) <= 100:
        raise DataError(f"jpeg quality out of range: {quality}")
    hwc = np.rint(to_hwc(arr) * 255.0).astype(np.uint8)
    # 4:4:4 sampling so quality 100 stays near-lossless
    flags = [cv2.IMWRITE_JPEG_QUALITY, int(quality),
             cv2.IMWRITE_JPEG_SAMPLING_FACTOR, cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444]
    ok, buf = cv2.imencode(".jpg", hwc, flags)
    if not ok:
        raise DataError("jpeg encode failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    return to_chw(dec.astype(np.float32) / 255.0)


def gaussian_blur_chw(arr: np.ndarray, sigma: float) -> np.ndarray:
    ksize = 2 * int(np.ceil(3.0 * sigma)) + 1
    out = cv2.GaussianBlur(to_hwc(arr), (ksize, ksize), sigmaX=sigma, sigmaY=sigma)
    if out.ndim == 2:
        out = out[:, :, None]
    return to_chw(out)


def validate_probability_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DataError(f"probability mask must be (H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("probability mask contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("probability mask values must lie in [0, 1]")
    return arr


def validate_binary_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DataError(f"binary mask must be (H, W), got {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise DataError("binary mask values must be 0 or 1")
    return arr.astype(np.uint8)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Persist a probability mask as 8-bit PNG, value = round(255 * p)."""
    arr = validate_probability_mask(mask)
    png = np.rint(arr * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), png):
        raise DataError(f"cannot write mask: {path}")


def load_mask_png(path: str | Path) -> np.ndarray:
    png = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if png is None:
        raise DataError(f"cannot read mask: {path}")
    return png.astype(np.float32) / 255.0


def random_photo(rng: np.random.Generator, height: int, width: int, objects: int = 4,
                 noise: float = 2.0 / 255.0, with_labels: bool = False):
    """Generate a deterministic synthetic photo: smooth background, a few
    solid shapes, mild sensor noise.

    With ``with_labels=True`` also returns an int label map where pixel
    value k > 0 marks the k-th drawn shape (later shapes overwrite earlier
    ones), usable as input for the connected-component mask provider.
    """
    coarse = rng.uniform(0.15, 0.85, size=(3, 6, 6)).astype(np.float32)
    base = resize_chw(coarse, height, width, interpolation=cv2.INTER_LINEAR)
    labels = np.zeros((height, width), dtype=np.int32)
    hwc = to_hwc(base)
    for k in range(1, objects + 1):
        color = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
        cy = int(rng.integers(height // 6, height - height // 6))
        cx = int(rng.integers(width // 6, width - width // 6))
        ry = int(rng.integers(max(3, height // 16), max(4, height // 6)))
        rx = int(rng.integers(max(3, width // 16), max(4, width // 6)))
        shape_mask = np.zeros((height, width), dtype=np.uint8)
        if rng.random() < 0.5:
            cv2.ellipse(shape_mask, (cx, cy), (rx, ry), float(rng.uniform(0, 180)), 0, 360, 1, -1)
        else:
            cv2.rectangle(shape_mask, (cx - rx, cy - ry), (cx + rx, cy + ry), 1, -1)
        hwc[shape_mask == 1] = color
        labels[shape_mask == 1] = k
    img = to_chw(hwc)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    out = ImageTensor(img)
    if with_labels:
        return out, labels
    return out
