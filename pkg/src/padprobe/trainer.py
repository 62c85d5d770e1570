"""Supervised training of the dynamics model on box-sequence prediction."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .backbone import BackboneConfig, InputMode
from .dataset import T_PRED, T_REF, Dataset, load_dataset, window_starts
from .model import DynamicsModel, boxes_to_cxcywh

log = logging.getLogger(__name__)

TIERS = {"smoke": 500, "desk": 20_000, "paper": 200_000}
CHECKPOINT_NAME = "checkpoint.pt"
SIDECAR_NAME = "checkpoint.json"


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    dataset: str | None = None  # path of the training split
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    roi_size: int = 4
    t_pred: int = T_PRED
    tier: str | None = None

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")

    @classmethod
    def for_tier(cls, tier: str, **kwargs) -> TrainConfig:
        if tier not in TIERS:
            raise ValueError(f"unknown tier {tier!r}; choose from {sorted(TIERS)}")
        return cls(iterations=TIERS[tier], tier=tier, **kwargs)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "dataset": self.dataset,
            "backbone": self.backbone.to_dict(),
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "roi_size": self.roi_size,
            "t_pred": self.t_pred,
            "tier": self.tier,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["backbone"] = BackboneConfig.from_dict(d.get("backbone", {}))
        return cls(**d)


@dataclass
class Checkpoint:
    model: DynamicsModel
    config: TrainConfig
    losses: list[float]
    path: Path | None = None

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out / CHECKPOINT_NAME)
        sidecar = {
            "config": self.config.to_dict(),
            "frame_size": list(self.model.frame_size),
            "seed": self.config.seed,
            "iterations": len(self.losses),
            "losses": self.losses,
        }
        (out / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=1) + "\n")
        self.path = out
        return out


def build_model(config: TrainConfig, frame_size: tuple[int, int]) -> DynamicsModel:
    torch.manual_seed(config.seed)
    return DynamicsModel(config.backbone, frame_size, roi_size=config.roi_size, seed=config.seed)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    root = Path(path)
    meta = json.loads((root / SIDECAR_NAME).read_text())
    config = TrainConfig.from_dict(meta["config"])
    model = build_model(config, tuple(meta["frame_size"]))
    model.load_state_dict(torch.load(root / CHECKPOINT_NAME, weights_only=True))
    model.eval()
    return Checkpoint(model, config, list(meta["losses"]), root)


def loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over steps and balls of the squared l2 distance between ``(cx, cy, w, h)`` boxes."""
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((predicted - target) ** 2).sum(-1).mean()


class WindowSampler:
    """Draws random training windows (video, start) with a seeded generator."""

    def __init__(self, dataset: Dataset, t_pred: int = T_PRED, seed: int = 0, with_frames: bool = True):
        if not dataset.videos:
            raise ValueError("training dataset has no videos")
        self.dataset = dataset
        self.t_pred = t_pred
        self.with_frames = with_frames
        self.index = [
            (vi, s)
            for vi, v in enumerate(dataset.videos)
            for s in window_starts(v.n_frames, "train", T_REF, t_pred)
        ]
        self.rng = np.random.default_rng(seed)

    def batch(self, size: int):
        picks = self.rng.integers(len(self.index), size=size)
        frames, ref, tgt = [], [], []
        for p in picks:
            vi, s = self.index[p]
            video = self.dataset.videos[vi]
            ref.append(video.boxes[s - T_REF : s])
            tgt.append(video.boxes[s : s + self.t_pred])
            if self.with_frames:
                frames.append(video.frames[s - T_REF : s])
        frames_t = torch.from_numpy(np.stack(frames)) if self.with_frames else None
        return frames_t, torch.from_numpy(np.stack(ref)), torch.from_numpy(np.stack(tgt))


def train(
    config: TrainConfig,
    dataset: Dataset | None = None,
    out_dir: str | os.PathLike | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Train from scratch; the loss curve is recorded per iteration.

    Runs are reproducible for a given config on one thread; multi-threaded
    reductions in the conv kernels may change the low bits.
    """
    visual = config.backbone.input_mode is InputMode.VISUAL
    if dataset is None:
        if config.dataset is None:
            raise ValueError("no dataset given")
        dataset = load_dataset(config.dataset, with_frames=visual)
    frame_size = dataset.frame_size
    model = build_model(config, frame_size)
    model.train()
    sampler = WindowSampler(dataset, config.t_pred, seed=config.seed, with_frames=visual)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.iterations)
    losses: list[float] = []
    t0 = time.time()
    for it in range(config.iterations):
        frames, ref, tgt = sampler.batch(config.batch_size)
        pred = model(frames, ref.float(), config.t_pred)
        value = loss(pred, boxes_to_cxcywh(tgt.float(), frame_size))
        v = float(value.detach())
        if not math.isfinite(v):
            raise TrainingDiverged(it, v)
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        sched.step()
        losses.append(v)
        if progress is not None:
            progress(it, v)
    log.info("trained %d iterations in %.1fs, final loss %.5f", config.iterations, time.time() - t0, losses[-1])
    model.eval()
    ckpt = Checkpoint(model, config, losses)
    if out_dir is not None:
        ckpt.save(out_dir)
    return ckpt


def smoothed(losses, window: int = 50) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) < window:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")


__all__ = ["TIERS", "Checkpoint", "TrainConfig", "TrainingDiverged", "load_checkpoint", "loss", "train"]
