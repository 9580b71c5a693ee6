"""Seeded, resumable training harness shared by all model kinds.

Each step draws one source dataset according to the configured sampling
ratios, then a batch of sample indices, both from a counter-derived RNG, so
an interrupted run resumed from a checkpoint sees exactly the batches the
uninterrupted run would have seen. Optimization is AdamW with a linearly
decaying learning rate and cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import DataError, TrainingDiverged
from ..images import ImageTensor
from ..pairs import PairGroup, PairSample


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200_000
    batch_size: int = 16
    input_side: int = 512
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 1000
    keep_last: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise DataError("need lr_start >= lr_end > 0")

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Small CPU-friendly test profile."""
        base = dict(iterations=2000, batch_size=4, input_side=256)
        base.update(overrides)
        return cls(**base)

    def learning_rate(self, step: int) -> float:
        if self.iterations == 1:
            return self.lr_start
        frac = min(step, self.iterations - 1) / (self.iterations - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def pick_dataset(rng: np.random.Generator, weights: Sequence[float]) -> int:
    """Draw a dataset index proportionally to the given ratios."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or (w < 0).any() or w.sum() <= 0:
        raise DataError("sampling ratios must be non-negative and sum > 0")
    return int(rng.choice(w.size, p=w / w.sum()))


def batch_plan(seed: int, step: int, sizes: Sequence[int], weights: Sequence[float],
               batch_size: int) -> tuple[int, np.ndarray]:
    """Deterministic (dataset index, sample indices) for a given step."""
    rng = np.random.default_rng([seed, step])
    ds = pick_dataset(rng, weights)
    idx = rng.integers(0, sizes[ds], size=batch_size)
    return ds, idx


def _stack_masks(masks: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks).astype(np.float32)).unsqueeze(1)


def _head_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    if logits.shape[-2:] != masks.shape[-2:]:
        logits = F.interpolate(logits, size=masks.shape[-2:], mode="bilinear",
                               align_corners=False)
    return F.binary_cross_entropy_with_logits(logits, masks)


class Task:
    """Adapter turning task-specific samples into a scalar batch loss."""

    name = "task"

    def loss(self, model: nn.Module, samples: list) -> torch.Tensor:
        raise NotImplementedError

    def finalize(self, model: nn.Module) -> None:
        pass


class ClassifierTask(Task):
    """Binary SPG-vs-SDG routing over PairSample batches."""

    name = "classifier"

    def loss(self, model, samples: list[PairSample]) -> torch.Tensor:
        inputs = torch.stack([model.build_input(s.probe, s.reference) for s in samples])
        labels = torch.tensor(
            [1.0 if s.group == PairGroup.SPG else 0.0 for s in samples])
        return F.binary_cross_entropy_with_logits(model(inputs), labels)

    def finalize(self, model) -> None:
        model.mark_trained()


class DassTask(Task):
    """Pixel cross-entropy for the difference-aware segmenter, supervised at
    full resolution."""

    name = "dass"

    def loss(self, model, samples: list[PairSample]) -> torch.Tensor:
        inputs = torch.stack([model.build_input(s.probe, s.reference) for s in samples])
        masks = _stack_masks([s.gt_mask for s in samples])
        return _head_loss(model.forward_logits(inputs), masks)


class CorrDinoTask(Task):
    """Cross-entropy on the probe-side mask, plus the reference side when a
    donor label exists."""

    name = "corrdino"

    def loss(self, model, samples: list[PairSample]) -> torch.Tensor:
        logits_a, logits_b = model.forward_logits(
            [s.probe for s in samples], [s.reference for s in samples])
        masks_a = _stack_masks([s.gt_mask for s in samples])
        loss = _head_loss(logits_a, masks_a)
        if all(s.donor_mask is not None for s in samples):
            masks_b = _stack_masks([s.donor_mask for s in samples])
            loss = loss + _head_loss(logits_b, masks_b)
        return loss


class WebIMLTask(Task):
    """Equal-weight cross-entropy over every supervision head."""

    name = "webiml"

    def loss(self, model, samples: list[tuple[ImageTensor, np.ndarray]]) -> torch.Tensor:
        images = torch.stack([torch.from_numpy(img.data) for img, _ in samples])
        masks = _stack_masks([m for _, m in samples])
        heads = model.forward_heads(images)
        return torch.stack([_head_loss(h, masks) for h in heads]).mean()


TASKS = {t.name: t for t in (ClassifierTask(), DassTask(), CorrDinoTask(), WebIMLTask())}


@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    checkpoint_path: Path | None


def _checkpoint(model, optimizer, step, cfg: TrainConfig, task_name: str,
                out_dir: Path, kept: list[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"step_{step:08d}.pt"
    torch.save({
        "step": step,
        "task": task_name,
        "train_config": asdict(cfg),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
    }, str(path))
    kept.append(path)
    while len(kept) > cfg.keep_last:
        old = kept.pop(0)
        old.unlink(missing_ok=True)
    return path


def train(model: nn.Module, task: str | Task,
          datasets: Sequence[tuple[list, float]], cfg: TrainConfig,
          out_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    """Run the training loop.

    ``datasets`` is a list of (samples, ratio) sources. With ``out_dir``
    set, checkpoints are written every ``cfg.checkpoint_every`` steps
    (keep-last-``cfg.keep_last``); ``resume_from`` restores model, optimizer,
    and step counter, and the seeded sampler makes the continuation
    batch-identical to an uninterrupted run.
    """
    if isinstance(task, str):
        try:
            task = TASKS[task]
        except KeyError:
            raise DataError(f"unknown training task: {task!r} (known: {sorted(TASKS)})")
    if not datasets or any(len(samples) == 0 for samples, _ in datasets):
        raise DataError("training needs at least one non-empty dataset")
    sizes = [len(samples) for samples, _ in datasets]
    weights = [ratio for _, ratio in datasets]
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    start_step = 0
    if resume_from is not None:
        payload = torch.load(str(resume_from), map_location="cpu", weights_only=False)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_step = int(payload["step"])
    out_path = Path(out_dir) if out_dir is not None else None
    kept: list[Path] = sorted(out_path.glob("step_*.pt")) if out_path else []
    losses: list[float] = []
    last_ckpt: Path | None = None
    model.train()
    for step in range(start_step, cfg.iterations):
        ds, idx = batch_plan(cfg.seed, step, sizes, weights, cfg.batch_size)
        samples = [datasets[ds][0][i] for i in idx]
        lr = cfg.learning_rate(step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        loss = task.loss(model, samples)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (task={task.name}, lr={lr:.2e}, "
                f"dataset={ds}, batch={idx.tolist()})")
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        done = step + 1
        if out_path and (done % cfg.checkpoint_every == 0 or done == cfg.iterations):
            last_ckpt = _checkpoint(model, optimizer, done, cfg, task.name, out_path, kept)
    task.finalize(model)
    model.eval()
    return TrainResult(steps=cfg.iterations, losses=losses, checkpoint_path=last_ckpt)
