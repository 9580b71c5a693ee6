"""Loaders turning persisted artifacts back into training/eval samples."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError
from ..images import ImageTensor, load_mask_png, resize_chw, resize_mask
from ..pairs import PairSample
from .manifest import AnnotationRecord, load_manifest


def _resized(image: ImageTensor, side: int | None) -> ImageTensor:
    if side is None or (image.height == side and image.width == side):
        return image
    return ImageTensor(np.clip(resize_chw(image.data, side, side), 0.0, 1.0))


def _mask_for(record: AnnotationRecord, side: int | None, shape) -> np.ndarray:
    if record.mask_path is None:
        raise DataError(f"record {record.id} has no mask file")
    mask = (load_mask_png(record.mask_path) > 0.5).astype(np.uint8)
    target = (side, side) if side is not None else shape
    if mask.shape != target:
        mask = resize_mask(mask, target[0], target[1])
    return mask


def load_pair_samples(manifest_path: str | Path, group: str | None = None,
                      require_mask: bool = True, side: int | None = None
                      ) -> list[PairSample]:
    """Rebuild PairSamples from a manifest, optionally filtered by group and
    resized to a square side for batched training."""
    records, _ = load_manifest(manifest_path)
    samples = []
    for record in records:
        if record.status != "ok":
            continue
        if group is not None and record.group != group:
            continue
        probe = _resized(ImageTensor.load(record.probe_path), side)
        reference = _resized(ImageTensor.load(record.reference_path), side)
        mask = None
        if require_mask:
            mask = _mask_for(record, side, (probe.height, probe.width))
        samples.append(PairSample(probe=probe, reference=reference,
                                  group=record.group, gt_mask=mask,
                                  provenance={"record_id": record.id}))
    if not samples:
        raise DataError(f"no usable samples in {manifest_path}")
    return samples


def load_image_mask_samples(source: str | Path, side: int | None = None
                            ) -> list[tuple[ImageTensor, np.ndarray]]:
    """Load (image, binary mask) samples from a jitter output directory
    (pairs of ``<stem>.png`` / ``<stem>_mask.png``) or a manifest file."""
    source = Path(source)
    samples: list[tuple[ImageTensor, np.ndarray]] = []
    if source.is_dir():
        for img_path in sorted(source.glob("*.png")):
            if img_path.stem.endswith("_mask"):
                continue
            mask_path = img_path.with_name(img_path.stem + "_mask.png")
            if not mask_path.is_file():
                continue
            image = _resized(ImageTensor.load(img_path), side)
            mask = (load_mask_png(mask_path) > 0.5).astype(np.uint8)
            if mask.shape != (image.height, image.width):
                mask = resize_mask(mask, image.height, image.width)
            samples.append((image, mask))
    elif source.is_file():
        records, _ = load_manifest(source)
        for record in records:
            if record.status != "ok" or record.mask_path is None:
                continue
            image = _resized(ImageTensor.load(record.probe_path), side)
            mask = _mask_for(record, side, (image.height, image.width))
            samples.append((image, mask))
    else:
        raise DataError(f"no such dataset source: {source}")
    if not samples:
        raise DataError(f"no usable samples in {source}")
    return samples
