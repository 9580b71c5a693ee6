"""Auto-annotation of probe/reference pairs.

Each pair is routed by the group classifier: aligned in-place edits go to
the difference-aware segmenter, donor-sharing pairs to the correlation
model. The resulting probe-side mask is scored with QES and recorded; a
model failure produces a failed record, never a partial mask.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corrdino import CorrDino, corr_dino_forward
from ..dass import DASSModel, dass_forward
from ..errors import ImlkitError
from ..images import ImageTensor, save_mask_png
from ..pairs import PairClassifier, PairGroup, route_pair
from ..qes import QESConfig, qes_score
from .hashing import md5_hex, phash
from .manifest import AnnotationRecord


@dataclass
class AnnotatorModels:
    classifier: PairClassifier
    dass: DASSModel
    corrdino: CorrDino


def annotate_pair(probe: ImageTensor, reference: ImageTensor, models: AnnotatorModels,
                  cfg: QESConfig = QESConfig(),
                  probe_path: str = "", reference_path: str = "",
                  mask_dir: str | Path | None = None,
                  persist_all: bool = False,
                  source: str = "", record_id: str | None = None) -> AnnotationRecord:
    """Annotate one pair and return its record.

    The mask PNG is written under ``mask_dir`` for retained records (or all
    records with ``persist_all``); the in-memory mask always rides on the
    record for downstream use.
    """
    record_id = record_id or uuid.uuid4().hex[:12]
    digest = md5_hex(probe)
    perceptual = f"{phash(probe):016x}"
    try:
        group = route_pair(probe, reference, models.classifier)
        if group == PairGroup.SPG:
            mask = dass_forward(probe, reference, models.dass)
        else:
            mask, _ = corr_dino_forward(probe, reference, models.corrdino)
        score = qes_score(mask, cfg)
    except ImlkitError as exc:
        return AnnotationRecord(
            id=record_id, probe_path=probe_path, reference_path=reference_path,
            group=PairGroup.SDG.value, mask_path=None, qes=0.0, retained=False,
            md5=digest, phash=perceptual, source=source,
            status=f"failed: {exc}", mask=None)
    retained = score > cfg.keep_threshold
    mask_path = None
    if mask_dir is not None and (retained or persist_all):
        mask_dir = Path(mask_dir)
        mask_dir.mkdir(parents=True, exist_ok=True)
        mask_path = str(mask_dir / f"{record_id}.png")
        save_mask_png(mask, mask_path)
    return AnnotationRecord(
        id=record_id, probe_path=probe_path, reference_path=reference_path,
        group=group.value, mask_path=mask_path, qes=score, retained=retained,
        md5=digest, phash=perceptual, source=source, status="ok", mask=mask)
