"""Self-supervised synthesis of training pairs and the SPG/SDG router.

Two pair families exist. An SPG (shared probe) pair is an image plus an
in-place edit of itself: the shared content is the background. An SDG
(shared donor) pair copies regions out of one image into another: the
shared content is the donor object. A small convolutional classifier routes
incoming pairs by predicting P(SPG) from the downsampled pair and its
absolute difference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, UntrainedModelError
from .images import ImageTensor, jpeg_roundtrip_chw, resize_chw, resize_mask, to_chw, to_hwc

MIN_PAIR_SIDE = 64


class PairGroup(str, enum.Enum):
    SPG = "SPG"
    SDG = "SDG"


@dataclass
class PairSample:
    """A probe/reference pair with its construction label.

    ``gt_mask`` marks manipulated probe pixels; ``donor_mask`` (SDG only)
    marks the source regions on the reference. ``provenance`` records the
    applied operations.
    """

    probe: ImageTensor
    reference: ImageTensor
    group: PairGroup
    gt_mask: np.ndarray | None = None
    donor_mask: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.group = PairGroup(self.group)
        if self.gt_mask is not None:
            if self.gt_mask.shape != (self.probe.height, self.probe.width):
                raise DataError("gt_mask size must equal the probe size")
            if not np.isin(self.gt_mask, (0, 1)).all():
                raise DataError("gt_mask values must be 0 or 1")
            self.gt_mask = self.gt_mask.astype(np.uint8)


@dataclass(frozen=True)
class SpgAugmentConfig:
    """Global augmentations applied to the manipulated copy."""

    brightness: float = 0.1
    contrast: float = 0.1
    jpeg_quality: tuple[int, int] = (60, 95)
    resize_jitter: float = 0.1


def _random_rect(rng: np.random.Generator, height: int, width: int,
                 min_frac: float = 0.12, max_frac: float = 0.4) -> tuple[int, int, int, int]:
    rh = int(rng.integers(max(8, int(height * min_frac)), max(9, int(height * max_frac))))
    rw = int(rng.integers(max(8, int(width * min_frac)), max(9, int(width * max_frac))))
    y = int(rng.integers(0, height - rh + 1))
    x = int(rng.integers(0, width - rw + 1))
    return y, x, rh, rw


def _feathered_paste(canvas: np.ndarray, patch: np.ndarray, y: int, x: int, feather: int = 2):
    """Paste a (C, h, w) patch with a soft border to avoid hard seams."""
    _, h, w = patch.shape
    alpha = np.ones((h, w), dtype=np.float32)
    if feather > 0 and min(h, w) > 2 * feather:
        alpha = cv2.blur(cv2.copyMakeBorder(
            np.ones((h - 2 * feather, w - 2 * feather), np.float32),
            feather, feather, feather, feather, cv2.BORDER_CONSTANT, value=0.0,
        ), (2 * feather + 1, 2 * feather + 1))
    region = canvas[:, y:y + h, x:x + w]
    canvas[:, y:y + h, x:x + w] = alpha[None] * patch + (1.0 - alpha[None]) * region


def _augment_probe(arr: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                   cfg: SpgAugmentConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    applied = {}
    if cfg.brightness > 0 or cfg.contrast > 0:
        gain = 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast))
        bias = float(rng.uniform(-cfg.brightness, cfg.brightness))
        arr = np.clip(arr * gain + bias, 0.0, 1.0)
        applied["color"] = {"gain": gain, "bias": bias}
    if cfg.jpeg_quality is not None:
        q = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
        arr = jpeg_roundtrip_chw(arr, q)
        applied["jpeg"] = q
    if cfg.resize_jitter > 0:
        factor = 1.0 + float(rng.uniform(-cfg.resize_jitter, cfg.resize_jitter))
        h = max(MIN_PAIR_SIDE, round(arr.shape[1] * factor))
        w = max(MIN_PAIR_SIDE, round(arr.shape[2] * factor))
        arr = np.clip(resize_chw(arr, h, w), 0.0, 1.0)
        mask = resize_mask(mask, h, w)
        applied["resize"] = factor
    return arr.astype(np.float32), mask, applied


def synthesize_spg_pair(image: ImageTensor, rng: np.random.Generator,
                        donor: ImageTensor | None = None,
                        augment: SpgAugmentConfig = SpgAugmentConfig()) -> PairSample:
    """Forge an in-place edit of `image` and return (forged, original).

    The manipulation is one of internal copy-paste, splice from `donor`
    (when provided), or region removal via median fill. Global augmentations
    are applied to the forged copy only.
    """
    if image.height < MIN_PAIR_SIDE or image.width < MIN_PAIR_SIDE:
        raise DataError(f"SPG synthesis needs images >= {MIN_PAIR_SIDE}px per side")
    h, w = image.height, image.width
    forged = image.data.copy()
    mask = np.zeros((h, w), dtype=np.uint8)
    ops = ["copy_paste", "removal"] + (["splice"] if donor is not None else [])
    op = ops[int(rng.integers(len(ops)))]
    y, x, rh, rw = _random_rect(rng, h, w)
    if op == "copy_paste":
        sy, sx, _, _ = _random_rect(rng, h, w)
        sy = min(sy, h - rh)
        sx = min(sx, w - rw)
        patch = image.data[:, sy:sy + rh, sx:sx + rw].copy()
        _feathered_paste(forged, patch, y, x)
        detail = {"src": (sy, sx)}
    elif op == "splice":
        dy, dx, dh, dw = _random_rect(rng, donor.height, donor.width)
        patch = resize_chw(donor.data[:, dy:dy + dh, dx:dx + dw], rh, rw)
        _feathered_paste(forged, np.clip(patch, 0.0, 1.0), y, x)
        detail = {"donor_rect": (dy, dx, dh, dw)}
    else:  # removal: background-color median fill with feathered border
        ring = np.concatenate([
            image.data[:, max(0, y - 4):y, x:x + rw].reshape(3, -1),
            image.data[:, y + rh:y + rh + 4, x:x + rw].reshape(3, -1),
            image.data[:, y:y + rh, max(0, x - 4):x].reshape(3, -1),
            image.data[:, y:y + rh, x + rw:x + rw + 4].reshape(3, -1),
        ], axis=1)
        fill = np.median(ring, axis=1) if ring.size else np.full(3, 0.5, np.float32)
        patch = np.tile(fill.astype(np.float32)[:, None, None], (1, rh, rw))
        _feathered_paste(forged, patch, y, x)
        detail = {"fill": fill.tolist()}
    mask[y:y + rh, x:x + rw] = 1
    region = (y, x, rh, rw)
    forged, mask, applied = _augment_probe(forged, mask, rng, augment)
    return PairSample(
        probe=ImageTensor(forged),
        reference=image,
        group=PairGroup.SPG,
        gt_mask=mask,
        provenance={"op": op, "region": region, "area": rh * rw, **detail,
                    "augment": applied},
    )


def synthesize_sdg_pair(donor: ImageTensor, target: ImageTensor, rng: np.random.Generator,
                        n_regions: int | None = None,
                        scale_range: tuple[float, float] = (0.6, 1.4),
                        align: int | None = None,
                        max_tries: int = 50) -> PairSample:
    """Copy 1-3 regions from `donor`, resize them, paste into `target`.

    Pasted rectangles never overlap. ``align`` snaps source/destination
    corners and sizes to a pixel grid and is meant for planted-patch tests
    (combine with ``scale_range=(1.0, 1.0)`` for bit-exact content sharing).
    """
    for img in (donor, target):
        if img.height < MIN_PAIR_SIDE or img.width < MIN_PAIR_SIDE:
            raise DataError(f"SDG synthesis needs images >= {MIN_PAIR_SIDE}px per side")
    n = int(n_regions) if n_regions is not None else int(rng.integers(1, 4))
    if not 1 <= n <= 3:
        raise DataError(f"n_regions must be in [1, 3], got {n}")
    probe = target.data.copy()
    mask = np.zeros((target.height, target.width), dtype=np.uint8)
    donor_mask = np.zeros((donor.height, donor.width), dtype=np.uint8)
    regions = []

    def snap(v: int) -> int:
        return (v // align) * align if align else v

    placed = 0
    tries = 0
    while placed < n and tries < max_tries:
        tries += 1
        sy, sx, sh, sw = _random_rect(rng, donor.height, donor.width)
        sy, sx = snap(sy), snap(sx)
        sh, sw = max(align or 8, snap(sh)), max(align or 8, snap(sw))
        sh = min(sh, donor.height - sy)
        sw = min(sw, donor.width - sx)
        scale = float(rng.uniform(*scale_range))
        ph = max(4, round(sh * scale))
        pw = max(4, round(sw * scale))
        if align:
            ph, pw = max(align, snap(ph)), max(align, snap(pw))
        if ph >= target.height or pw >= target.width:
            continue
        y = snap(int(rng.integers(0, target.height - ph + 1)))
        x = snap(int(rng.integers(0, target.width - pw + 1)))
        if mask[y:y + ph, x:x + pw].any():
            continue
        patch = donor.data[:, sy:sy + sh, sx:sx + sw]
        if (ph, pw) != (sh, sw):
            patch = np.clip(resize_chw(patch, ph, pw), 0.0, 1.0)
        probe[:, y:y + ph, x:x + pw] = patch
        mask[y:y + ph, x:x + pw] = 1
        donor_mask[sy:sy + sh, sx:sx + sw] = 1
        regions.append({"src": (sy, sx, sh, sw), "dst": (y, x, ph, pw), "scale": scale})
        placed += 1
    if placed == 0:
        raise DataError("could not place any SDG region (targets too small?)")
    return PairSample(
        probe=ImageTensor(probe),
        reference=donor,
        group=PairGroup.SDG,
        gt_mask=mask,
        donor_mask=donor_mask,
        provenance={"regions": regions},
    )


class PairClassifier(nn.Module):
    """4 stride-2 conv blocks + GAP + linear head over the 7-channel
    (probe, reference, |difference|) downsampled pair."""

    def __init__(self, input_side: int = 128, widths=(16, 32, 64, 128)):
        super().__init__()
        self.input_side = input_side
        layers = []
        prev = 7
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.GELU()]
            prev = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 1)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0)

    def mark_trained(self) -> None:
        self.trained_flag.fill_(1.0)

    def build_input(self, probe: ImageTensor, reference: ImageTensor) -> torch.Tensor:
        s = self.input_side
        p = resize_chw(probe.data, s, s)
        r = resize_chw(reference.data, s, s)
        diff = np.abs(p - r).mean(axis=0, keepdims=True)
        return torch.from_numpy(np.concatenate([p, r, diff], axis=0).astype(np.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x).mean(dim=(-2, -1))
        return self.head(feats).squeeze(-1)


def classify_pair(probe: ImageTensor, reference: ImageTensor, clf: PairClassifier) -> float:
    """P(SPG) for an unordered pair; predictions are averaged over both
    orderings, so swapping the inputs can never flip the routing decision."""
    if not clf.trained:
        raise UntrainedModelError("pair classifier has not been trained")
    clf.eval()
    with torch.no_grad():
        a = clf.build_input(probe, reference)
        b = clf.build_input(reference, probe)
        logits = clf(torch.stack([a, b]))
        probs = torch.sigmoid(logits)
    return float(probs.mean().item())


def route_pair(probe: ImageTensor, reference: ImageTensor, clf: PairClassifier) -> PairGroup:
    """Fig-3 routing rule: p >= 0.5 goes to the SPG branch."""
    p = classify_pair(probe, reference, clf)
    return PairGroup.SPG if p >= 0.5 else PairGroup.SDG
