"""Evaluation protocol: fixed-threshold IoU/F1 plus pixel AUC, optionally
under a robustness perturbation. For the resize perturbation the ground
truth is nearest-neighbor resized to the perturbed geometry, so predictions
and labels stay aligned."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DataError
from ..images import ImageTensor, resize_mask, validate_binary_mask
from ..metrics import EvalReport, SampleScores, binarize, f1, iou, perturb, pixel_auc

Predictor = Callable[[ImageTensor], np.ndarray]


def evaluate(model: Predictor, dataset: Sequence[tuple[ImageTensor, np.ndarray]],
             perturbation: tuple[str, float] | None = None,
             threshold: float = 0.5) -> EvalReport:
    """Score a single-image localizer over (image, binary ground truth)
    samples. ``model`` is any callable mapping an image to a probability
    mask; ``perturbation`` is a (kind, param) pair from the metrics suite."""
    if not dataset:
        raise DataError("evaluation dataset is empty")
    samples = []
    for i, (image, gt) in enumerate(dataset):
        gt = validate_binary_mask(gt)
        if gt.shape != (image.height, image.width):
            raise DataError(f"sample {i}: ground truth size mismatch")
        if perturbation is not None:
            kind, param = perturbation
            image = perturb(image, kind, param)
            if gt.shape != (image.height, image.width):
                gt = resize_mask(gt, image.height, image.width)
        pred = model(image)
        if pred.shape != (image.height, image.width):
            raise DataError(f"sample {i}: prediction size mismatch")
        hard = binarize(pred, threshold)
        try:
            auc = pixel_auc(pred, gt)
        except DataError:
            auc = None  # single-class ground truth: AUC undefined, flagged
        samples.append(SampleScores(
            sample_id=str(i), iou=iou(hard, gt), f1=f1(hard, gt), auc=auc))
    name = f"{perturbation[0]}={perturbation[1]}" if perturbation else None
    return EvalReport(samples=samples, threshold=threshold, perturbation=name)
