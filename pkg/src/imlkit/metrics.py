"""Localization metrics and the robustness perturbation suite.

Predictions are binarized with a fixed threshold (strict >) and scored with
IoU and binary F1; probability maps are additionally scored with pixel-level
ROC AUC. Both-empty mask pairs score 1.0 (a correct "no manipulation" call).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DataError
from .images import (
    ImageTensor,
    gaussian_blur_chw,
    jpeg_roundtrip_chw,
    resize_chw,
    validate_binary_mask,
    validate_probability_mask,
)

DEFAULT_THRESHOLD = 0.5


def binarize(mask: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixel = 1 iff p > threshold (strict)."""
    arr = validate_probability_mask(mask)
    return (arr > threshold).astype(np.uint8)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = validate_binary_mask(pred)
    gt = validate_binary_mask(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return inter / union


def f1(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = validate_binary_mask(pred)
    gt = validate_binary_mask(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their run."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pixel_auc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Area under the pixel-level ROC curve (trapezoidal over thresholds).

    Computed with the midrank identity, which equals the trapezoid rule over
    unique score thresholds, ties included. Requires both classes in gt.
    """
    pred = validate_probability_mask(pred)
    gt = validate_binary_mask(gt)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pos = int(gt.sum())
    neg = gt.size - pos
    if pos == 0 or neg == 0:
        raise DataError("pixel_auc undefined: ground truth contains a single class")
    ranks = _midranks(pred.ravel())
    pos_rank_sum = float(ranks[gt.ravel() == 1].sum())
    return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


PERTURB_KINDS = ("resize", "blur", "jpeg")


def perturb(image: ImageTensor, kind: str, param: float) -> ImageTensor:
    """Robustness-suite distortions: resize (scale factor), Gaussian blur
    (odd kernel size), or JPEG recompression (quality)."""
    if kind == "resize":
        if not 0.0 < param <= 1.0:
            raise DataError(f"resize scale must be in (0, 1], got {param}")
        h = max(1, round(image.height * param))
        w = max(1, round(image.width * param))
        return ImageTensor(np.clip(resize_chw(image.data, h, w), 0.0, 1.0))
    if kind == "blur":
        k = int(param)
        if k != param or k < 1 or k % 2 == 0:
            raise DataError(f"blur kernel size must be an odd positive integer, got {param}")
        hwc = cv2.GaussianBlur(image.data.transpose(1, 2, 0), (k, k), 0)
        return ImageTensor(np.clip(hwc.transpose(2, 0, 1), 0.0, 1.0))
    if kind == "jpeg":
        q = int(param)
        if q != param or not 1 <= q <= 100:
            raise DataError(f"jpeg quality must be an integer in [1, 100], got {param}")
        return ImageTensor(jpeg_roundtrip_chw(image.data, q))
    raise DataError(f"unknown perturbation kind: {kind!r} (known: {PERTURB_KINDS})")


@dataclass
class SampleScores:
    sample_id: str
    iou: float
    f1: float
    auc: float | None


@dataclass
class EvalReport:
    """Per-sample and corpus-mean localization scores."""

    samples: list[SampleScores]
    threshold: float
    perturbation: str | None = None

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.samples])) if self.samples else 0.0

    @property
    def mean_f1(self) -> float:
        return float(np.mean([s.f1 for s in self.samples])) if self.samples else 0.0

    @property
    def mean_auc(self) -> float | None:
        vals = [s.auc for s in self.samples if s.auc is not None]
        return float(np.mean(vals)) if vals else None

    def render(self) -> str:
        lines = []
        for s in self.samples:
            auc = f"{s.auc:.4f}" if s.auc is not None else "n/a"
            lines.append(f"sample {s.sample_id} iou={s.iou:.4f} f1={s.f1:.4f} auc={auc}")
        auc = f"{self.mean_auc:.4f}" if self.mean_auc is not None else "n/a"
        lines.append(
            f"summary n={len(self.samples)} threshold={self.threshold} "
            f"perturbation={self.perturbation or 'none'} "
            f"mean_iou={self.mean_iou:.4f} mean_f1={self.mean_f1:.4f} mean_auc={auc}"
        )
        return "\n".join(lines)
