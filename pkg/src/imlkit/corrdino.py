"""Correlation-based localization over frozen ViT features.

Pipeline per image pair: frozen token features -> all-pairs correlation
volumes (cross + self) -> learnable channel aggregation -> feature super
resolution against the concatenated 4-layer stack -> multi-aspect denoising
into a probability mask. Both sides share weights, so swapping the input
images swaps the output masks exactly.

Correlation convention: ``corr(fx, fy)[k, i, j]`` is the ReLU-clamped cosine
similarity between source token (i, j) of ``fx`` and target token
``k = k_row * gw + k_col`` of ``fy``; zero vectors correlate to 0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import VitBackend, ViTFeatureStack, create_backend
from .errors import DataError, ModelError
from .images import ImageTensor


def correlation(fx: torch.Tensor, fy: torch.Tensor) -> torch.Tensor:
    """All-pairs token similarity volume.

    Accepts (C, gh, gw) or batched (B, C, gh, gw); returns (gh*gw, gh, gw)
    or (B, gh*gw, gh, gw). Computed in float64 internally so near-parallel
    token pairs cannot numerically exceed exact self-similarity.
    """
    if fx.shape != fy.shape:
        raise DataError(f"correlation shape mismatch: {tuple(fx.shape)} vs {tuple(fy.shape)}")
    squeeze = fx.ndim == 3
    if squeeze:
        fx = fx.unsqueeze(0)
        fy = fy.unsqueeze(0)
    if fx.ndim != 4:
        raise DataError(f"expected (C, gh, gw) or (B, C, gh, gw), got {tuple(fx.shape)}")
    dtype = fx.dtype
    b, c, gh, gw = fx.shape
    x = fx.reshape(b, c, gh * gw).double()
    y = fy.reshape(b, c, gh * gw).double()
    xn = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    yn = torch.linalg.vector_norm(y, dim=1, keepdim=True)
    x = torch.where(xn > 0, x / xn, torch.zeros_like(x))
    y = torch.where(yn > 0, y / yn, torch.zeros_like(y))
    vol = torch.bmm(y.transpose(1, 2), x)  # (B, Ny, Nx): vol[k, m] = <y_k, x_m>
    vol = torch.clamp(vol, min=0.0).reshape(b, gh * gw, gh, gw).to(dtype)
    return vol[0] if squeeze else vol


class LearnableAggregation(nn.Module):
    """Reduce a correlation volume to K learned channels plus exact
    channel-mean and channel-max statistic maps (K + 2 total)."""

    def __init__(self, in_channels: int, k: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.k = k
        self.reduce1 = nn.Conv2d(in_channels, k, kernel_size=1)
        self.reduce2 = nn.Conv2d(k, k, kernel_size=1)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        learned = self.reduce2(F.relu(self.reduce1(volume)))
        avg = volume.mean(dim=-3, keepdim=True)
        mx = volume.max(dim=-3, keepdim=True).values
        return torch.cat([learned, avg, mx], dim=-3)


class FeatureSuperResolution(nn.Module):
    """Reconstruct fine detail by fusing the concatenated 4-layer token stack
    with the aggregated correlation at 8x/4x/2x/1x of the token grid.

    Purely linear (1x1 convs + bilinear interpolation): the response to the
    aggregation input is exactly additive. Outputs are ordered finest (8x)
    to coarsest (1x); the coarsest entry feeds the denoiser's global-context
    head.
    """

    SCALES = (8, 4, 2, 1)  # finest -> coarsest

    def __init__(self, stack_channels: int, aggr_channels: int, d: int = 128):
        super().__init__()
        self.d = d
        self.stack_proj = nn.ModuleList(
            nn.Conv2d(stack_channels, d, kernel_size=1) for _ in self.SCALES
        )
        self.aggr_proj = nn.ModuleList(
            nn.Conv2d(aggr_channels, d, kernel_size=1) for _ in self.SCALES
        )
        self.fuse = nn.ModuleList(nn.Conv2d(d, d, kernel_size=1) for _ in self.SCALES)

    def forward(self, stack_cat: torch.Tensor, aggr: torch.Tensor) -> list[torch.Tensor]:
        if stack_cat.shape[-2:] != aggr.shape[-2:]:
            raise DataError(
                f"token grid mismatch: {tuple(stack_cat.shape[-2:])} vs {tuple(aggr.shape[-2:])}"
            )
        gh, gw = stack_cat.shape[-2:]
        outs = []
        for i, scale in enumerate(self.SCALES):
            size = (gh * scale, gw * scale)
            a = self.stack_proj[i](stack_cat)
            b = self.aggr_proj[i](aggr)
            if scale != 1:
                a = F.interpolate(a, size=size, mode="bilinear", align_corners=False)
                b = F.interpolate(b, size=size, mode="bilinear", align_corners=False)
            outs.append(self.fuse[i](a + b))
        return outs


class MultiAspectDenoiser(nn.Module):
    """Top-down multi-scale fusion with dilated refinement.

    Takes 4 feature maps ordered finest to coarsest. The coarsest level is
    concatenated with its global-average-pooled broadcast and reduced; each
    finer level receives the upsampled coarser result plus a 1x1 lateral.
    All fused levels are upsampled to the finest scale, concatenated, passed
    through dilated 3x3 convs (dilations 1, 2, 3, 6), re-concatenated with
    the finest fused level, and reduced to single-channel logits.
    """

    DILATIONS = (1, 2, 3, 6)

    def __init__(self, in_channels: Sequence[int], width: int = 64):
        super().__init__()
        if len(in_channels) != 4:
            raise DataError(f"denoiser expects 4 scales, got {len(in_channels)}")
        self.width = width
        # replicate padding keeps constant inputs constant (the convs stay
        # translation-equivariant up to the border)
        self.coarse_head = nn.Conv2d(2 * in_channels[3], width, kernel_size=3, padding=1,
                                     padding_mode="replicate")
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, width, kernel_size=1) for c in in_channels[:3]
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, padding=1, padding_mode="replicate")
            for _ in range(3)
        )
        self.dilated = nn.ModuleList(
            nn.Conv2d(4 * width, width, kernel_size=3, padding=d, dilation=d,
                      padding_mode="replicate")
            for d in self.DILATIONS
        )
        self.head = nn.Conv2d(5 * width, 1, kernel_size=3, padding=1,
                              padding_mode="replicate")

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(feats) != 4:
            raise DataError(f"denoiser expects 4 scales, got {len(feats)}")
        coarse = feats[3]
        pooled = coarse.mean(dim=(-2, -1), keepdim=True).expand_as(coarse)
        fused = F.gelu(self.coarse_head(torch.cat([coarse, pooled], dim=-3)))
        levels = [fused]
        for i in (2, 1, 0):
            up = F.interpolate(levels[-1], size=feats[i].shape[-2:], mode="bilinear",
                               align_corners=False)
            levels.append(F.gelu(self.fuse[i](up + self.laterals[i](feats[i]))))
        finest_size = feats[0].shape[-2:]
        aligned = [
            lvl if lvl.shape[-2:] == finest_size
            else F.interpolate(lvl, size=finest_size, mode="bilinear", align_corners=False)
            for lvl in levels
        ]
        stacked = torch.cat(aligned, dim=-3)
        dilated = torch.cat([F.gelu(conv(stacked)) for conv in self.dilated], dim=-3)
        return self.head(torch.cat([dilated, levels[-1]], dim=-3))


@dataclass(frozen=True)
class CorrDinoConfig:
    backend: str = "stub"
    input_side: int = 518
    patch_stride: int = 14
    backend_channels: int = 64
    backend_seed: int = 0
    k: int = 64
    d: int = 128
    denoiser_width: int = 64

    @property
    def grid(self) -> int:
        return -(-self.input_side // self.patch_stride)


class CorrDino(nn.Module):
    """Shared-weight two-stream localization model over a frozen encoder.

    The backbone is held outside the module tree when frozen, so training
    steps can never touch its parameters; features are extracted under
    ``torch.no_grad`` and gradients stop at the correlation volumes.
    """

    def __init__(self, config: CorrDinoConfig = CorrDinoConfig(), backend: VitBackend | None = None):
        super().__init__()
        self.config = config
        if backend is None:
            kwargs = {"patch_stride": config.patch_stride}
            if config.backend == "stub":
                kwargs.update(seed=config.backend_seed, channels=config.backend_channels)
            backend = create_backend(config.backend, **kwargs)
        if backend.kind != "vit":
            raise ModelError(f"corr-dino needs a vit-kind backend, got {backend.backend_id!r}")
        if not backend.frozen:
            raise ModelError("corr-dino requires a frozen backend")
        self._backend = (backend,)  # tuple-wrapped: not a registered submodule
        n = config.grid * config.grid
        self.aggregation = LearnableAggregation(2 * n, k=config.k)
        self.fsr = FeatureSuperResolution(
            stack_channels=4 * config.backend_channels,
            aggr_channels=config.k + 2,
            d=config.d,
        )
        self.denoiser = MultiAspectDenoiser([config.d] * 4, width=config.denoiser_width)

    @property
    def backend(self) -> VitBackend:
        return self._backend[0]

    def _extract(self, images: Sequence[ImageTensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack features for a list of images: (B, C, g, g) last layer and
        (B, 4C, g, g) concatenated stack."""
        lasts, cats = [], []
        with torch.no_grad():
            for img in images:
                if img.height != self.config.input_side or img.width != self.config.input_side:
                    raise DataError(
                        f"corr-dino configured for {self.config.input_side}px inputs, "
                        f"got {img.height}x{img.width}"
                    )
                stack = self.backend.extract(img)
                lasts.append(stack.layers[-1])
                cats.append(torch.cat(stack.layers, dim=0))
        return torch.stack(lasts), torch.stack(cats)

    def _side(self, last_self: torch.Tensor, last_other: torch.Tensor,
              stack_cat: torch.Tensor) -> torch.Tensor:
        cross = correlation(last_self, last_other)
        self_vol = correlation(last_self, last_self)
        aggr = self.aggregation(torch.cat([cross, self_vol], dim=-3))
        feats = self.fsr(stack_cat, aggr)
        return self.denoiser(feats)

    def forward_logits(self, images_a: Sequence[ImageTensor],
                       images_b: Sequence[ImageTensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched single-channel logits at the finest feature scale."""
        last_a, cat_a = self._extract(images_a)
        last_b, cat_b = self._extract(images_b)
        return self._side(last_a, last_b, cat_a), self._side(last_b, last_a, cat_b)

    def predict_pair(self, img_a: ImageTensor, img_b: ImageTensor) -> tuple[np.ndarray, np.ndarray]:
        self.eval()
        with torch.no_grad():
            logits_a, logits_b = self.forward_logits([img_a], [img_b])
            mask_a = _logits_to_mask(logits_a[0], img_a.height, img_a.width)
            mask_b = _logits_to_mask(logits_b[0], img_b.height, img_b.width)
        return mask_a, mask_b

    def checkpoint_config(self) -> dict:
        return asdict(self.config)


def _logits_to_mask(logits: torch.Tensor, height: int, width: int) -> np.ndarray:
    probs = torch.sigmoid(logits).unsqueeze(0)
    probs = F.interpolate(probs, size=(height, width), mode="bilinear", align_corners=False)
    return probs[0, 0].numpy().astype(np.float32)


def corr_dino_forward(img_a: ImageTensor, img_b: ImageTensor,
                      model: CorrDino) -> tuple[np.ndarray, np.ndarray]:
    """Probability masks for both sides of a pair (probe first)."""
    return model.predict_pair(img_a, img_b)


def save_corrdino(model: CorrDino, path: str | Path) -> None:
    torch.save({"kind": "corrdino", "config": model.checkpoint_config(),
                "state": model.state_dict()}, str(path))


def load_corrdino(path: str | Path, backend: VitBackend | None = None) -> CorrDino:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "corrdino":
        raise ModelError(f"not a corr-dino checkpoint: {path}")
    model = CorrDino(CorrDinoConfig(**payload["config"]), backend=backend)
    model.load_state_dict(payload["state"])
    return model
