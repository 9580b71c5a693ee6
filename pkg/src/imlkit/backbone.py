"""Pluggable feature-extractor boundary.

All pretrained-model dependence is isolated behind a registry of backends
keyed by string id. Two feature layouts exist:

* ``vit`` kind: 4 token-grid layers of identical shape (C, gh, gw), where
  ``layers[-1]`` is the final transformer block (richest semantics) and the
  earlier entries are the three preceding blocks.
* ``pyramid`` kind: 4 stages at spatial strides 4/8/16/32.

The ``stub`` backends compute deterministic pseudo-features from local patch
statistics projected by seeded fixed random matrices, so identical pixel
patches yield identical token features regardless of position.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import BackendError, DataError
from .images import ImageTensor

PATCH_STRIDE_DEFAULT = 14
STUB_CHANNELS_DEFAULT = 64
PYRAMID_STRIDES = (4, 8, 16, 32)
WEIGHTS_DIR_ENV = "IMLKIT_WEIGHTS_DIR"


@dataclass
class ViTFeatureStack:
    """Features from the last four transformer blocks of a ViT backbone.

    ``layers[-1]`` is the final block. All layers share shape (C, gh, gw)
    with gh = ceil(H / patch_stride) and gw analogous.
    """

    layers: list[torch.Tensor]
    patch_stride: int

    def __post_init__(self):
        if len(self.layers) != 4:
            raise DataError(f"ViT stack needs exactly 4 layers, got {len(self.layers)}")
        shapes = {tuple(l.shape) for l in self.layers}
        if len(shapes) != 1 or self.layers[0].ndim != 3:
            raise DataError(f"ViT stack layers must share one (C, gh, gw) shape, got {shapes}")

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.layers[0].shape[1:])

    @property
    def channels(self) -> int:
        return self.layers[0].shape[0]


@dataclass
class FeaturePyramid:
    """Four feature maps at spatial strides 4, 8, 16, 32 of the input."""

    stages: list[torch.Tensor]
    strides: tuple[int, int, int, int] = PYRAMID_STRIDES

    def __post_init__(self):
        if len(self.stages) != 4:
            raise DataError(f"pyramid needs exactly 4 stages, got {len(self.stages)}")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.shape[1] != math.ceil(a.shape[1] / 2) or b.shape[2] != math.ceil(a.shape[2] / 2):
                raise DataError("pyramid stages must halve spatially (ceil)")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.stages)


def _pad_to_multiple(arr: np.ndarray, multiple: int) -> np.ndarray:
    """Reflection-pad a (C, H, W) array so both sides divide `multiple`."""
    _, h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="reflect")


class Backend:
    """Plugin contract: identified by id, declares kind, channels, stride(s)."""

    backend_id: str
    kind: str
    frozen: bool

    def state_bytes(self) -> bytes:
        """Serialized parameters, for bitwise freeze-invariance checks."""
        raise NotImplementedError


class VitBackend(Backend):
    kind = "vit"
    channels: int
    patch_stride: int

    def extract(self, image: ImageTensor) -> ViTFeatureStack:
        raise NotImplementedError


class PyramidBackend(Backend):
    kind = "pyramid"
    stage_channels: tuple[int, ...]

    def extract(self, image: ImageTensor) -> FeaturePyramid:
        raise NotImplementedError

    def forward_batch(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Batched (B, C, H, W) -> per-stage tensors; H, W divisible by 32."""
        raise NotImplementedError


def _patch_stats_features(arr: np.ndarray, stride: int, proj: np.ndarray) -> np.ndarray:
    """Per-patch [mean, std, random projection of the centered patch].

    arr: (C, H, W) with H, W multiples of `stride`. proj: (K, C*stride*stride).
    Returns (K + 2, gh, gw). Depends only on patch content, never position.
    """
    c, h, w = arr.shape
    gh, gw = h // stride, w // stride
    patches = (
        arr.reshape(c, gh, stride, gw, stride)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, c * stride * stride)
    )
    mean = patches.mean(axis=1)
    std = patches.std(axis=1)
    centered = patches - mean[:, None]
    projected = centered @ proj.T
    feats = np.concatenate([mean[:, None], std[:, None], projected], axis=1)
    return feats.T.reshape(-1, gh, gw)


class StubVitBackend(VitBackend):
    """Deterministic pseudo-ViT: position-independent patch-statistic tokens."""

    backend_id = "stub"
    frozen = True

    def __init__(self, seed: int = 0, channels: int = STUB_CHANNELS_DEFAULT,
                 patch_stride: int = PATCH_STRIDE_DEFAULT):
        if channels < 3:
            raise BackendError("stub needs >= 3 channels (mean, std, projection)")
        self.seed = int(seed)
        self.channels = int(channels)
        self.patch_stride = int(patch_stride)
        dim = 3 * self.patch_stride * self.patch_stride
        self._proj = []
        for layer in range(4):
            rng = np.random.default_rng([self.seed, layer])
            self._proj.append(
                rng.standard_normal((self.channels - 2, dim)) / math.sqrt(dim)
            )

    def extract(self, image: ImageTensor) -> ViTFeatureStack:
        s = self.patch_stride
        if image.height < s or image.width < s:
            raise DataError(f"image smaller than one {s}x{s} patch")
        arr = _pad_to_multiple(image.data.astype(np.float64), s)
        layers = [
            torch.from_numpy(_patch_stats_features(arr, s, proj)).float()
            for proj in self._proj
        ]
        return ViTFeatureStack(layers=layers, patch_stride=s)

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, *self._proj)
        return buf.getvalue()


class StubPyramidBackend(PyramidBackend):
    """Deterministic pseudo-CNN pyramid built from per-stride patch statistics."""

    backend_id = "stub-pyramid"
    frozen = True

    def __init__(self, seed: int = 0, stage_channels: Sequence[int] = (32, 64, 128, 256)):
        if len(stage_channels) != 4:
            raise BackendError("pyramid backends need 4 stage channel counts")
        self.seed = int(seed)
        self.stage_channels = tuple(int(c) for c in stage_channels)
        self._proj = []
        for i, (stride, channels) in enumerate(zip(PYRAMID_STRIDES, self.stage_channels)):
            rng = np.random.default_rng([self.seed, 100 + i])
            dim = 3 * stride * stride
            self._proj.append(rng.standard_normal((channels - 2, dim)) / math.sqrt(dim))

    def extract(self, image: ImageTensor) -> FeaturePyramid:
        arr = _pad_to_multiple(image.data.astype(np.float64), PYRAMID_STRIDES[-1])
        stages = []
        for stride, proj in zip(PYRAMID_STRIDES, self._proj):
            feats = _patch_stats_features(arr, stride, proj)
            gh = math.ceil(image.height / stride)
            gw = math.ceil(image.width / stride)
            stages.append(torch.from_numpy(feats[:, :gh, :gw].copy()).float())
        return FeaturePyramid(stages=stages)

    def forward_batch(self, x: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            outs = []
            for sample in x:
                img = ImageTensor(np.clip(sample.detach().cpu().numpy(), 0.0, 1.0))
                outs.append(self.extract(img).stages)
        return [torch.stack([o[i] for o in outs]) for i in range(4)]

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, *self._proj)
        return buf.getvalue()


class _PyramidNet(nn.Module):
    """Small 4-stage convnet emitting features at strides 4/8/16/32."""

    def __init__(self, in_channels: int, widths: Sequence[int]):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w1, w1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w1, w1, 3, padding=1), nn.GELU(),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w2, w2, 3, padding=1), nn.GELU(),
        )
        self.down3 = nn.Sequential(
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w3, w3, 3, padding=1), nn.GELU(),
        )
        self.down4 = nn.Sequential(
            nn.Conv2d(w3, w4, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(w4, w4, 3, padding=1), nn.GELU(),
        )

    def forward(self, x):
        s1 = self.stem(x)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        s4 = self.down4(s3)
        return [s1, s2, s3, s4]


class CnnPyramidBackend(PyramidBackend, nn.Module):
    """Trainable pyramid encoder (the `cnn` backend)."""

    backend_id = "cnn"
    frozen = False

    def __init__(self, in_channels: int = 3, stage_channels: Sequence[int] = (32, 64, 128, 256)):
        nn.Module.__init__(self)
        if len(stage_channels) != 4:
            raise BackendError("pyramid backends need 4 stage channel counts")
        self.in_channels = int(in_channels)
        self.stage_channels = tuple(int(c) for c in stage_channels)
        self.net = _PyramidNet(self.in_channels, self.stage_channels)

    def forward_batch(self, x: torch.Tensor) -> list[torch.Tensor]:
        _, _, h, w = x.shape
        ph = (-h) % 32
        pw = (-w) % 32
        if ph or pw:
            x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
        stages = self.net(x)
        return [
            s[:, :, : math.ceil(h / stride), : math.ceil(w / stride)]
            for s, stride in zip(stages, PYRAMID_STRIDES)
        ]

    def extract(self, image: ImageTensor) -> FeaturePyramid:
        if self.in_channels != 3:
            raise BackendError("single-image extraction needs a 3-channel backend")
        with torch.no_grad():
            x = torch.from_numpy(image.data).unsqueeze(0)
            stages = self.forward_batch(x)
        return FeaturePyramid(stages=[s[0] for s in stages])

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.net.state_dict(), buf)
        return buf.getvalue()


class TorchVitBackend(VitBackend):
    """Real-weight ViT plugin: loads a TorchScript module from disk.

    The scripted module must map a (1, 3, H, W) float tensor in [0, 1] to a
    (4, C, gh, gw) tensor holding the last four encoder layers, final layer
    last, with gh = ceil(H / patch_stride). Weights are frozen on load.
    """

    backend_id = "vit-frozen"
    frozen = True

    def __init__(self, path: str | Path | None = None, patch_stride: int = PATCH_STRIDE_DEFAULT):
        if path is None:
            weights_dir = os.environ.get(WEIGHTS_DIR_ENV)
            if not weights_dir:
                raise BackendError(
                    f"vit-frozen needs a weights path (argument or ${WEIGHTS_DIR_ENV}/vit-frozen.pt)"
                )
            path = Path(weights_dir) / "vit-frozen.pt"
        path = Path(path)
        if not path.is_file():
            raise BackendError(f"vit-frozen weights not found: {path}")
        self.path = path
        self.patch_stride = int(patch_stride)
        self.module = torch.jit.load(str(path), map_location="cpu")
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.channels = -1  # discovered on first extraction

    def extract(self, image: ImageTensor) -> ViTFeatureStack:
        s = self.patch_stride
        if image.height < s or image.width < s:
            raise DataError(f"image smaller than one {s}x{s} patch")
        arr = _pad_to_multiple(image.data, s)
        with torch.no_grad():
            out = self.module(torch.from_numpy(arr).unsqueeze(0))
        if out.ndim != 4 or out.shape[0] != 4:
            raise BackendError(f"vit-frozen module must return (4, C, gh, gw), got {tuple(out.shape)}")
        gh = math.ceil(image.height / s)
        gw = math.ceil(image.width / s)
        if out.shape[2] != gh or out.shape[3] != gw:
            raise BackendError(
                f"vit-frozen grid {tuple(out.shape[2:])} does not match stride {s} for "
                f"{image.height}x{image.width} input"
            )
        self.channels = out.shape[1]
        return ViTFeatureStack(layers=[out[i].detach() for i in range(4)], patch_stride=s)

    def state_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.module.state_dict(), buf)
        return buf.getvalue()


_REGISTRY: dict[str, Callable[..., Backend]] = {}


def register_backend(backend_id: str, factory: Callable[..., Backend]) -> None:
    _REGISTRY[backend_id] = factory


def create_backend(backend_id: str, **kwargs) -> Backend:
    try:
        factory = _REGISTRY[backend_id]
    except KeyError:
        raise BackendError(f"unknown backend id: {backend_id!r} (known: {sorted(_REGISTRY)})")
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise BackendError(f"cannot construct backend {backend_id!r}: {exc}")


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


register_backend("stub", StubVitBackend)
register_backend("stub-pyramid", StubPyramidBackend)
register_backend("cnn", CnnPyramidBackend)
register_backend("vit-frozen", TorchVitBackend)


def extract_vit_features(image: ImageTensor, backend: VitBackend) -> ViTFeatureStack:
    if backend.kind != "vit":
        raise BackendError(f"backend {backend.backend_id!r} is not vit-kind")
    return backend.extract(image)


def extract_pyramid_features(image: ImageTensor, backend: PyramidBackend) -> FeaturePyramid:
    if backend.kind != "pyramid":
        raise BackendError(f"backend {backend.backend_id!r} is not pyramid-kind")
    return backend.extract(image)


def stub_features(image: ImageTensor, seed: int, kind: str = "vit", **kwargs):
    """Deterministic pseudo-features for tests; `kind` selects the layout."""
    if kind == "vit":
        return StubVitBackend(seed=seed, **kwargs).extract(image)
    if kind == "pyramid":
        return StubPyramidBackend(seed=seed, **kwargs).extract(image)
    raise BackendError(f"unknown stub kind: {kind!r}")
