"""Dataset construction, training/eval harness, and the CLI."""

from .annotate import AnnotatorModels, annotate_pair
from .data import load_image_mask_samples, load_pair_samples
from .evaluate import evaluate
from .hashing import DedupIndex, dedup_check_insert, hamming, md5_hex, phash
from .manifest import AnnotationRecord, append_records, build_manifest, load_manifest
from .training import TrainConfig, TrainResult, batch_plan, pick_dataset, train

__all__ = [
    "AnnotatorModels", "annotate_pair",
    "load_image_mask_samples", "load_pair_samples",
    "evaluate",
    "DedupIndex", "dedup_check_insert", "hamming", "md5_hex", "phash",
    "AnnotationRecord", "append_records", "build_manifest", "load_manifest",
    "TrainConfig", "TrainResult", "batch_plan", "pick_dataset", "train",
]
