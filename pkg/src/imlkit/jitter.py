"""Object Jitter: subtle, semantics-preserving artifact synthesis.

Instead of altering what an image shows, 1-3 segmented objects are slightly
enlarged, overexposed, or texture-degraded (JPEG, reverse JPEG, blur), then
edge-blended back. The perturbed object masks become the training ground
truth. Every operation is local: pixels outside the dilated union of the
pre- and post-jitter masks are bit-identical to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import cv2
import numpy as np

from .errors import DataError, JitterSkip
from .images import ImageTensor, gaussian_blur_chw, jpeg_roundtrip_chw, resize_chw, to_chw, to_hwc

SCALE_RANGE = (1.0, 1.15)
GAIN_RANGE = (1.0, 1.25)
JPEG_RANGE = (50, 90)
BLUR_RANGE = (0.5, 1.5)
BAND_RANGE = (1, 5)


@dataclass
class ObjectMask:
    """Binary object mask; degenerate and whole-image objects are rejected."""

    data: np.ndarray
    source: str = "unknown"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or not np.isin(arr, (0, 1)).all():
            raise DataError("object mask must be a 2-D array of {0, 1}")
        area = int(arr.sum())
        if area == 0:
            raise DataError("object mask is empty")
        if area >= 0.5 * arr.size:
            raise DataError("object mask covers half the image or more")
        self.data = arr.astype(np.uint8)

    @property
    def area(self) -> int:
        return int(self.data.sum())


class MaskProvider:
    """Source of candidate object masks for an image."""

    provider_id: str = "unknown"

    def candidates(self, image: ImageTensor) -> list[np.ndarray]:
        """Raw binary candidate masks; validity filtering happens later."""
        raise NotImplementedError


class CcLabelProvider(MaskProvider):
    """Deterministic test provider: connected components of a label image."""

    provider_id = "cc-labels"

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels)

    def candidates(self, image: ImageTensor) -> list[np.ndarray]:
        if self.labels.shape != (image.height, image.width):
            raise DataError("label map size must match the image")
        out = []
        for value in np.unique(self.labels):
            if value <= 0:
                continue
            region = (self.labels == value).astype(np.uint8)
            n, comps = cv2.connectedComponents(region)
            for comp in range(1, n):
                out.append((comps == comp).astype(np.uint8))
        return out


class SegmenterProvider(MaskProvider):
    """Plugin boundary for external segmentation models: wraps a callable
    mapping an ImageTensor to a list of binary masks."""

    provider_id = "segmenter"

    def __init__(self, segment_fn: Callable[[ImageTensor], list[np.ndarray]]):
        self.segment_fn = segment_fn

    def candidates(self, image: ImageTensor) -> list[np.ndarray]:
        return list(self.segment_fn(image))


def select_objects(image: ImageTensor, provider: MaskProvider,
                   rng: np.random.Generator, max_objects: int = 3) -> list[ObjectMask]:
    """Pick 1-3 valid, mutually disjoint object masks; overlapping picks are
    rejected and resampled. Raises JitterSkip when nothing valid exists."""
    valid = []
    for cand in provider.candidates(image):
        try:
            valid.append(ObjectMask(cand, source=provider.provider_id))
        except DataError:
            continue
    if not valid:
        raise JitterSkip("provider yielded no valid object")
    count = int(rng.integers(1, max_objects + 1))
    order = rng.permutation(len(valid))
    picked: list[ObjectMask] = []
    occupied = np.zeros(valid[0].data.shape, dtype=bool)
    for idx in order:
        if len(picked) == count:
            break
        cand = valid[int(idx)]
        if (occupied & cand.data.astype(bool)).any():
            continue
        picked.append(cand)
        occupied |= cand.data.astype(bool)
    return picked


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def size_jitter(image: ImageTensor, mask: ObjectMask, scale: float
                ) -> tuple[ImageTensor, ObjectMask]:
    """Enlarge the object's crop about its centroid; scale 1.0 is exact
    identity. Objects grown past the frame are clipped."""
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1]:
        raise DataError(f"scale must be in {SCALE_RANGE}, got {scale}")
    if scale == 1.0:
        return image, mask
    h, w = image.height, image.width
    y0, y1, x0, x1 = _mask_bbox(mask.data)
    crop_img = image.data[:, y0:y1, x0:x1]
    crop_mask = mask.data[y0:y1, x0:x1]
    nh = max(1, round((y1 - y0) * scale))
    nw = max(1, round((x1 - x0) * scale))
    big_img = np.clip(resize_chw(crop_img, nh, nw), 0.0, 1.0)
    big_mask = cv2.resize(crop_mask, (nw, nh), interpolation=cv2.INTER_NEAREST)
    ys, xs = np.nonzero(mask.data)
    cy, cx = float(ys.mean()), float(xs.mean())
    ny0 = round(cy - (cy - y0) * scale)
    nx0 = round(cx - (cx - x0) * scale)
    sy0, sx0 = max(0, ny0), max(0, nx0)
    sy1, sx1 = min(h, ny0 + nh), min(w, nx0 + nw)
    cy0, cx0 = sy0 - ny0, sx0 - nx0
    big_img = big_img[:, cy0:cy0 + (sy1 - sy0), cx0:cx0 + (sx1 - sx0)]
    big_mask = big_mask[cy0:cy0 + (sy1 - sy0), cx0:cx0 + (sx1 - sx0)]
    out = image.data.copy()
    region = out[:, sy0:sy1, sx0:sx1]
    sel = big_mask.astype(bool)
    region[:, sel] = big_img[:, sel]
    new_mask = np.zeros((h, w), dtype=np.uint8)
    new_mask[sy0:sy1, sx0:sx1] = big_mask
    return ImageTensor(out), ObjectMask(new_mask, source=mask.source)


def exposure_jitter(image: ImageTensor, mask: ObjectMask, gain: float) -> ImageTensor:
    """Overexpose the masked pixels by `gain`, clipped to [0, 1]."""
    if not GAIN_RANGE[0] <= gain <= GAIN_RANGE[1]:
        raise DataError(f"gain must be in {GAIN_RANGE}, got {gain}")
    out = image.data.copy()
    sel = mask.data.astype(bool)
    out[:, sel] = np.clip(out[:, sel] * gain, 0.0, 1.0)
    return ImageTensor(out)


_reverse_jpeg_filter: Callable[[np.ndarray], np.ndarray] | None = None


def set_reverse_jpeg_filter(fn: Callable[[np.ndarray], np.ndarray] | None) -> None:
    """Install an external JPEG-artifact-removal model ((3,h,w) float ->
    same). ``None`` restores the built-in mild deblocking blur."""
    global _reverse_jpeg_filter
    _reverse_jpeg_filter = fn


def _reverse_jpeg(crop: np.ndarray) -> np.ndarray:
    if _reverse_jpeg_filter is not None:
        return np.clip(_reverse_jpeg_filter(crop), 0.0, 1.0)
    return np.clip(gaussian_blur_chw(crop, 0.6), 0.0, 1.0)


def texture_jitter(image: ImageTensor, mask: ObjectMask,
                   ops: Sequence[tuple], rng: np.random.Generator) -> ImageTensor:
    """Apply texture ops in order to the masked region only.

    Ops: ("jpeg", quality), ("blur", sigma), ("reverse_jpeg",). The bounding
    box is cropped, processed, and pasted back under the mask, so unmasked
    pixels are untouched.
    """
    if not ops:
        raise DataError("texture_jitter needs at least one op")
    y0, y1, x0, x1 = _mask_bbox(mask.data)
    crop = image.data[:, y0:y1, x0:x1].copy()
    for op in ops:
        name = op[0]
        if name == "jpeg":
            q = int(op[1])
            if not JPEG_RANGE[0] <= q <= JPEG_RANGE[1]:
                raise DataError(f"jpeg quality must be in {JPEG_RANGE}, got {q}")
            crop = jpeg_roundtrip_chw(crop, q)
        elif name == "blur":
            sigma = float(op[1])
            if not BLUR_RANGE[0] <= sigma <= BLUR_RANGE[1]:
                raise DataError(f"blur sigma must be in {BLUR_RANGE}, got {sigma}")
            crop = np.clip(gaussian_blur_chw(crop, sigma), 0.0, 1.0)
        elif name == "reverse_jpeg":
            crop = _reverse_jpeg(crop)
        else:
            raise DataError(f"unknown texture op: {name!r}")
    out = image.data.copy()
    sel = mask.data[y0:y1, x0:x1].astype(bool)
    out[:, y0:y1, x0:x1][:, sel] = crop[:, sel]
    return ImageTensor(out)


def blend_edges(original: ImageTensor, modified: ImageTensor, mask: ObjectMask,
                band: int, rng: np.random.Generator) -> ImageTensor:
    """Alpha-composite with a smooth transition of width `band` around the
    mask boundary. The eroded interior keeps `modified` bitwise; pixels
    farther than `band` outside the mask keep `original` bitwise."""
    if not BAND_RANGE[0] <= band <= BAND_RANGE[1]:
        raise DataError(f"band must be in {BAND_RANGE}, got {band}")
    if original.data.shape != modified.data.shape:
        raise DataError("blend inputs must share a shape")
    m = mask.data.astype(np.float32)
    ksize = 2 * band + 1
    if rng.random() < 0.5:
        alpha = cv2.blur(m, (ksize, ksize))
    else:
        alpha = cv2.GaussianBlur(m, (ksize, ksize), 0)
    kernel = np.ones((ksize, ksize), np.uint8)
    interior = cv2.erode(mask.data, kernel).astype(bool)
    exterior = ~cv2.dilate(mask.data, kernel).astype(bool)
    alpha = np.clip(alpha, 0.0, 1.0)
    blended = original.data + alpha[None] * (modified.data - original.data)
    out = np.where(interior[None], modified.data,
                   np.where(exterior[None], original.data, blended))
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


@dataclass
class JitterRecord:
    """One jittered image: the forged result, the union ground-truth mask,
    and the per-object operation log."""

    forged: ImageTensor
    gt_mask: np.ndarray
    ops_applied: list[dict]

    def __post_init__(self):
        if not 1 <= len(self.ops_applied) <= 3:
            raise DataError("a jitter record covers 1 to 3 objects")


OPS = ("size", "exposure", "texture")


def _draw_ops(rng: np.random.Generator) -> list[str]:
    """Uniformly random nonempty subset of the three op families."""
    while True:
        chosen = [op for op in OPS if rng.random() < 0.5]
        if chosen:
            return chosen


def apply_object_jitter(image: ImageTensor, provider: MaskProvider,
                        rng: np.random.Generator) -> JitterRecord:
    """Jitter 1-3 objects and blend the edges; reproducible from the seed."""
    picked = select_objects(image, provider, rng)
    current = image
    final_masks = []
    log = []
    for obj in picked:
        before = current
        working = current
        mask = obj
        ops = _draw_ops(rng)
        entry = {"source": obj.source, "ops": []}
        if "size" in ops:
            scale = float(rng.uniform(1.03, SCALE_RANGE[1]))
            working, mask = size_jitter(working, mask, scale)
            entry["ops"].append(("size", scale))
        if "exposure" in ops:
            gain = float(rng.uniform(1.05, GAIN_RANGE[1]))
            working = exposure_jitter(working, mask, gain)
            entry["ops"].append(("exposure", gain))
        if "texture" in ops:
            texture_ops = []
            for name in ("jpeg", "reverse_jpeg", "blur"):
                if rng.random() < 0.5:
                    if name == "jpeg":
                        texture_ops.append(("jpeg", int(rng.integers(*JPEG_RANGE))))
                    elif name == "blur":
                        texture_ops.append(("blur", float(rng.uniform(*BLUR_RANGE))))
                    else:
                        texture_ops.append(("reverse_jpeg",))
            if not texture_ops:
                texture_ops = [("jpeg", int(rng.integers(*JPEG_RANGE)))]
            working = texture_jitter(working, mask, texture_ops, rng)
            entry["ops"].append(("texture", texture_ops))
        band = int(rng.integers(BAND_RANGE[0], BAND_RANGE[1] + 1))
        entry["band"] = band
        current = blend_edges(before, working, mask, band, rng)
        final_masks.append(mask.data)
        log.append(entry)
    gt = np.zeros((image.height, image.width), dtype=np.uint8)
    for m in final_masks:
        gt |= m
    return JitterRecord(forged=current, gt_mask=gt, ops_applied=log)
