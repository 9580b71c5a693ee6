"""The Web-IML localization model.

A pyramid backbone feeds a Multi-Scale Perception decoder (pyramid pooling
over the coarsest stage plus top-down residual fusion). An initial mask is
predicted from the finest fused features and then refined by two
Self-Rectification rounds: the previous prediction is mapped to a
rectification feature, fused with the current features, re-weighted by a
Nested Channel Attention gate, spread through dilated convolutions, and
decoded into the next prediction. Each round has its own parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import PyramidBackend, create_backend
from .errors import DataError, ModelError
from .images import ImageTensor

POOL_SIZES = (1, 2, 3, 6)
DILATIONS = (1, 2, 3, 6)


class MultiScalePerception(nn.Module):
    """Pyramid pooling over the coarsest stage + top-down residual fusion."""

    def __init__(self, stage_channels: Sequence[int], width: int = 256):
        super().__init__()
        if len(stage_channels) != 4:
            raise DataError(f"expected a 4-stage pyramid, got {len(stage_channels)}")
        self.width = width
        c4 = stage_channels[3]
        self.global_convs = nn.ModuleList(
            nn.Conv2d(c4, width, kernel_size=1) for _ in POOL_SIZES
        )
        self.fuse4 = nn.Conv2d(len(POOL_SIZES) * width + c4, width, kernel_size=3, padding=1)
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, width, kernel_size=1) for c in stage_channels[:3]
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, padding=1) for _ in range(3)
        )

    def forward(self, stages: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(stages) != 4:
            raise DataError(f"expected 4 pyramid stages, got {len(stages)}")
        f4 = stages[3]
        size4 = f4.shape[-2:]
        pooled = [
            F.interpolate(conv(F.adaptive_avg_pool2d(f4, s)), size=size4,
                          mode="bilinear", align_corners=False)
            for conv, s in zip(self.global_convs, POOL_SIZES)
        ]
        out4 = F.gelu(self.fuse4(torch.cat(pooled + [f4], dim=-3)))
        outs = [None, None, None, out4]
        for i in (2, 1, 0):
            up = F.interpolate(outs[i + 1], size=stages[i].shape[-2:], mode="bilinear",
                               align_corners=False)
            outs[i] = F.gelu(self.fuse[i](up + self.laterals[i](stages[i])))
        return outs


class NestedChannelAttention(nn.Module):
    """Two nested squeeze gates over the channel axis.

    G1 = Avg(F) W1, G2 = G1 W2, A2 = sigmoid(W3 G2), A1 = sigmoid(W4 (G1*A2)),
    out = F * A1. All linears are bias-free, so zero input yields zero output
    and every output magnitude is bounded by the input magnitude.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        mid = max(1, channels // reduction)
        inner = max(1, channels // (reduction * reduction))
        self.w1 = nn.Linear(channels, mid, bias=False)
        self.w2 = nn.Linear(mid, inner, bias=False)
        self.w3 = nn.Linear(inner, mid, bias=False)
        self.w4 = nn.Linear(mid, channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g1 = self.w1(x.mean(dim=(-2, -1)))
        g2 = self.w2(g1)
        a2 = torch.sigmoid(self.w3(g2))
        a1 = torch.sigmoid(self.w4(g1 * a2))
        return x * a1[..., None, None]


class RectificationFeatureMapping(nn.Module):
    """5 cascaded conv-layers lifting a 1-channel prediction to features."""

    def __init__(self, width: int):
        super().__init__()
        mid = max(4, width // 4)
        self.net = nn.Sequential(
            nn.Conv2d(1, mid, 3, padding=1), nn.GELU(),
            nn.Conv2d(mid, mid, 3, padding=1), nn.GELU(),
            nn.Conv2d(mid, mid, 3, padding=1), nn.GELU(),
            nn.Conv2d(mid, mid, 3, padding=1), nn.GELU(),
            nn.Conv2d(mid, width, 3, padding=1),
        )

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return self.net(p)


class SelfRectification(nn.Module):
    """One rectification round: fuse features with the mapped previous
    prediction, gate with nested channel attention, refine with dilated
    convolutions, and emit the next prediction."""

    def __init__(self, width: int, reduction: int = 4):
        super().__init__()
        self.rfm = RectificationFeatureMapping(width)
        self.fuse_in = nn.Conv2d(2 * width, width, kernel_size=3, padding=1)
        self.attention = NestedChannelAttention(width, reduction=reduction)
        self.dilated = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, padding=d, dilation=d)
            for d in DILATIONS
        )
        self.fuse_out = nn.Conv2d(len(DILATIONS) * width, width, kernel_size=3, padding=1)
        self.head = nn.Conv2d(width, 1, kernel_size=1)

    def forward(self, feats: torch.Tensor, prev_probs: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        if feats.shape[-2:] != prev_probs.shape[-2:]:
            raise DataError("features and previous prediction must be aligned")
        rect = self.rfm(prev_probs)
        fused = F.gelu(self.fuse_in(torch.cat([feats, rect], dim=-3)))
        gated = self.attention(fused)
        spread = torch.cat([F.gelu(conv(gated)) for conv in self.dilated], dim=-3)
        out_feats = F.gelu(self.fuse_out(spread))
        logits = self.head(out_feats)
        return out_feats, logits


@dataclass(frozen=True)
class WebIMLConfig:
    backend: str = "cnn"
    backend_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    backend_seed: int = 0
    width: int = 256
    rounds: int = 2
    reduction: int = 4
    use_self_rectification: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise DataError(f"rounds must be >= 1, got {self.rounds}")


class WebIML(nn.Module):
    """Backbone -> Multi-Scale Perception -> initial head -> N rectification
    rounds. Inference returns the last head; training supervises all heads."""

    def __init__(self, config: WebIMLConfig = WebIMLConfig(),
                 backend: PyramidBackend | None = None):
        super().__init__()
        self.config = config
        if backend is None:
            if config.backend == "cnn":
                backend = create_backend("cnn", stage_channels=config.backend_channels)
            else:
                backend = create_backend(
                    config.backend, seed=config.backend_seed,
                    stage_channels=config.backend_channels,
                )
        if backend.kind != "pyramid":
            raise ModelError(f"web-iml needs a pyramid backend, got {backend.backend_id!r}")
        if backend.frozen:
            self._backend = (backend,)
        else:
            self.trainable_backend = backend  # registered: trains with the model
            self._backend = None
        self.perception = MultiScalePerception(backend.stage_channels, width=config.width)
        self.initial_head = nn.Conv2d(config.width, 1, kernel_size=1)
        if config.use_self_rectification:
            self.rounds = nn.ModuleList(
                SelfRectification(config.width, reduction=config.reduction)
                for _ in range(config.rounds)
            )
        else:
            self.rounds = nn.ModuleList()

    @property
    def backend(self) -> PyramidBackend:
        return self._backend[0] if self._backend is not None else self.trainable_backend

    def forward_heads(self, x: torch.Tensor) -> list[torch.Tensor]:
        """All supervision heads' logits at stride 4, initial head first."""
        backend = self.backend
        if backend.frozen:
            with torch.no_grad():
                stages = backend.forward_batch(x)
        else:
            stages = backend.forward_batch(x)
        fused = self.perception(stages)
        feats = fused[0]
        logits = self.initial_head(feats)
        heads = [logits]
        for rnd in self.rounds:
            feats, logits = rnd(feats, torch.sigmoid(heads[-1]))
            heads.append(logits)
        return heads

    def predict(self, image: ImageTensor) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            x = torch.from_numpy(image.data).unsqueeze(0)
            logits = self.forward_heads(x)[-1]
            probs = torch.sigmoid(logits)
            probs = F.interpolate(probs, size=(image.height, image.width), mode="bilinear",
                                  align_corners=False)
        return probs[0, 0].numpy().astype(np.float32)

    def checkpoint_config(self) -> dict:
        cfg = asdict(self.config)
        cfg["backend_channels"] = tuple(cfg["backend_channels"])
        return cfg


def web_iml_forward(image: ImageTensor, model: WebIML) -> np.ndarray:
    """Probability mask at the input resolution."""
    return model.predict(image)


def save_webiml(model: WebIML, path: str | Path) -> None:
    torch.save({"kind": "webiml", "config": model.checkpoint_config(),
                "state": model.state_dict()}, str(path))


def load_webiml(path: str | Path, backend: PyramidBackend | None = None) -> WebIML:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "webiml":
        raise ModelError(f"not a web-iml checkpoint: {path}")
    cfg = payload["config"]
    cfg["backend_channels"] = tuple(cfg["backend_channels"])
    model = WebIML(WebIMLConfig(**cfg), backend=backend)
    model.load_state_dict(payload["state"])
    return model
