"""Quality Evaluation Score: confidence/sharpness filtering of annotations.

QES = count(p > 1 - t_high) / count(p > t_low), the fraction of the predicted
potentially-manipulated area that the annotator is highly confident about.
Sharp, confident masks score near 1; diffuse or hedged masks score near 0.
An empty prediction (zero denominator) scores 0 by convention: a mask that
predicts nothing gives no evidence of quality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError
from .images import load_mask_png, validate_probability_mask

T_HIGH_DEFAULT = 1.0 / 16.0
T_LOW_DEFAULT = 1.0 / 16.0
KEEP_THRESHOLD_DEFAULT = 0.5


@dataclass(frozen=True)
class QESConfig:
    t_high: float = T_HIGH_DEFAULT
    t_low: float = T_LOW_DEFAULT
    keep_threshold: float = KEEP_THRESHOLD_DEFAULT

    def __post_init__(self):
        if not 0.0 < self.t_high < 0.5:
            raise DataError(f"t_high must be in (0, 0.5), got {self.t_high}")
        if not 0.0 < self.t_low < 0.5:
            raise DataError(f"t_low must be in (0, 0.5), got {self.t_low}")
        if not 0.0 < self.keep_threshold <= 1.0:
            raise DataError(f"keep_threshold must be in (0, 1], got {self.keep_threshold}")
        # high-confidence pixels must be a subset of the predicted area
        if 1.0 - self.t_high < self.t_low:
            raise DataError("config invalid: 1 - t_high must be >= t_low")


def qes_score(mask: np.ndarray, cfg: QESConfig = QESConfig()) -> float:
    """Score a raw probability mask; strict inequalities on both counts."""
    arr = validate_probability_mask(mask)
    denominator = int(np.count_nonzero(arr > cfg.t_low))
    if denominator == 0:
        return 0.0
    numerator = int(np.count_nonzero(arr > 1.0 - cfg.t_high))
    return numerator / denominator


def _default_mask_loader(record) -> np.ndarray:
    mask = getattr(record, "mask", None)
    if mask is not None:
        return mask
    mask_path = getattr(record, "mask_path", None)
    if mask_path:
        return load_mask_png(mask_path)
    raise DataError(f"record {getattr(record, 'id', '?')} has no probability mask")


def filter_annotations(records: Sequence, cfg: QESConfig = QESConfig(),
                       mask_loader: Callable = _default_mask_loader) -> list:
    """Keep records whose QES strictly exceeds the keep threshold.

    Every record gets its ``qes`` and ``retained`` fields updated, kept or
    not; the returned list preserves input order.
    """
    retained = []
    for record in records:
        score = qes_score(mask_loader(record), cfg)
        record.qes = score
        record.retained = score > cfg.keep_threshold
        if record.retained:
            retained.append(record)
    return retained
