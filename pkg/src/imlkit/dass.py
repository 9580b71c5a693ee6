"""Difference-aware segmentation for aligned (in-place-edit) image pairs.

The absolute difference between a forged image and its original roughly
marks the edit, but transmission noise leaves spurious highlights that a
plain OTSU binarization cannot remove. This module denoises the difference
map with semantics: the pair and its difference map are concatenated into a
7-channel input, encoded by a trainable pyramid, and decoded by the same
multi-aspect denoiser used for correlation features.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import CnnPyramidBackend
from .corrdino import MultiAspectDenoiser
from .errors import DataError, ModelError
from .images import ImageTensor, resize_chw


def difference_map(probe: ImageTensor, reference: ImageTensor) -> np.ndarray:
    """Channel-mean absolute difference, (H, W) float in [0, 1].

    The reference is bilinearly resized to the probe when sizes differ;
    same-size calls are exactly symmetric in their arguments.
    """
    ref = reference.data
    if ref.shape != probe.data.shape:
        ref = np.clip(resize_chw(ref, probe.height, probe.width), 0.0, 1.0)
    return np.abs(probe.data - ref).mean(axis=0)


def otsu_threshold(gray: np.ndarray) -> tuple[float | None, np.ndarray]:
    """Histogram threshold maximizing between-class variance.

    The map is quantized to 256 levels; the returned threshold is the bin
    midpoint (k + 0.5) / 255 of the best split, so ``gray > threshold``
    separates the two classes exactly for 8-bit data. Ties pick the lowest
    split. A constant map is flagged with threshold ``None`` and an all-zero
    mask.
    """
    arr = np.asarray(gray, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"difference map must be (H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("difference map values must lie in [0, 1]")
    levels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.int64)
    if levels.min() == levels.max():
        return None, np.zeros(arr.shape, dtype=np.uint8)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    total = float(levels.size)
    values = np.arange(256, dtype=np.float64)
    cum_count = np.cumsum(hist)
    cum_sum = np.cumsum(hist * values)
    best_k, best_score = -1, -1.0
    for k in range(255):
        c0 = cum_count[k]
        c1 = total - c0
        if c0 == 0.0 or c1 == 0.0:
            continue
        mu0 = cum_sum[k] / c0
        mu1 = (cum_sum[255] - cum_sum[k]) / c1
        score = (c0 / total) * (c1 / total) * (mu1 - mu0) ** 2
        if score > best_score:
            best_score = score
            best_k = k
    threshold = (best_k + 0.5) / 255.0
    return threshold, (arr > threshold).astype(np.uint8)


@dataclass(frozen=True)
class DASSConfig:
    encoder_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    denoiser_width: int = 64


class DASSModel(nn.Module):
    """Trainable 7-channel pyramid encoder + multi-aspect denoiser."""

    def __init__(self, config: DASSConfig = DASSConfig()):
        super().__init__()
        self.config = config
        self.encoder = CnnPyramidBackend(in_channels=7, stage_channels=config.encoder_channels)
        self.denoiser = MultiAspectDenoiser(config.encoder_channels, width=config.denoiser_width)

    @staticmethod
    def build_input(probe: ImageTensor, reference: ImageTensor) -> torch.Tensor:
        """7-channel tensor: probe, aligned reference, channel-mean |diff|."""
        diff = difference_map(probe, reference)
        ref = reference.data
        if ref.shape != probe.data.shape:
            ref = np.clip(resize_chw(ref, probe.height, probe.width), 0.0, 1.0)
        stacked = np.concatenate([probe.data, ref, diff[None]], axis=0)
        return torch.from_numpy(stacked.astype(np.float32))

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 7, H, W) -> (B, 1, ceil(H/4), ceil(W/4)) logits."""
        if x.ndim != 4 or x.shape[1] != 7:
            raise DataError(f"expected (B, 7, H, W), got {tuple(x.shape)}")
        stages = self.encoder.forward_batch(x)
        return self.denoiser(stages)

    def checkpoint_config(self) -> dict:
        cfg = asdict(self.config)
        cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
        return cfg


def dass_forward(probe: ImageTensor, reference: ImageTensor, model: DASSModel) -> np.ndarray:
    """Per-pixel manipulation probability at the probe's resolution."""
    model.eval()
    with torch.no_grad():
        x = model.build_input(probe, reference).unsqueeze(0)
        logits = model.forward_logits(x)
        probs = torch.sigmoid(logits)
        probs = F.interpolate(probs, size=(probe.height, probe.width), mode="bilinear",
                              align_corners=False)
    return probs[0, 0].numpy().astype(np.float32)


def save_dass(model: DASSModel, path: str | Path) -> None:
    torch.save({"kind": "dass", "config": model.checkpoint_config(),
                "state": model.state_dict()}, str(path))


def load_dass(path: str | Path) -> DASSModel:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "dass":
        raise ModelError(f"not a DASS checkpoint: {path}")
    cfg = payload["config"]
    cfg["encoder_channels"] = tuple(cfg["encoder_channels"])
    model = DASSModel(DASSConfig(**cfg))
    model.load_state_dict(payload["state"])
    return model
