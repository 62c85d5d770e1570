"""Rendering, box annotation and on-disk storage of simulated billiard clips.

Layout of a generated dataset directory::

    manifest.json
    video_0000/
        annotations.json
        frame_000.png ... frame_099.png
    video_0001/
    ...

Boxes are stored in pixels as ``[x_min, y_min, x_max, y_max]``.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image

from .sim_core import N_BALLS, EnvContext, EnvKind, WorldState, sample_env, simulate

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
N_FRAMES = 100
T_REF = 4
T_PRED = 20

BACKGROUND = (0, 0, 0)
BORDER_COLOR = (128, 128, 128)
BAR_COLOR = (192, 192, 192)
BALL_COLORS = ((255, 0, 0), (0, 255, 0), (0, 0, 255))


class DatasetIOError(OSError):
    pass


class DatasetName(str, enum.Enum):
    SIMB = "SimB"
    SIMB_BORDER = "SimB-Border"
    SIMB_SPLIT = "SimB-Split"

    @property
    def env_kind(self) -> EnvKind:
        return {
            DatasetName.SIMB: EnvKind.PLAIN,
            DatasetName.SIMB_BORDER: EnvKind.BORDER,
            DatasetName.SIMB_SPLIT: EnvKind.SPLIT,
        }[self]

    @classmethod
    def parse(cls, text: str) -> DatasetName:
        """Accept ``SimB-Border`` as well as the CLI spelling ``simb-border``."""
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise ValueError(f"unknown dataset {text!r}")


class BoxAnnotation(NamedTuple):
    ball_index: int
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class DatasetManifest:
    name: DatasetName
    split: str
    video_count: int
    global_seed: int
    format_version: str = FORMAT_VERSION
    n_frames: int = N_FRAMES

    def __post_init__(self):
        object.__setattr__(self, "name", DatasetName(self.name))
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if self.video_count < 0:
            raise ValueError("video_count must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        return cls(
            DatasetName(d["name"]),
            d["split"],
            int(d["video_count"]),
            int(d["global_seed"]),
            d.get("format_version", FORMAT_VERSION),
            int(d.get("n_frames", N_FRAMES)),
        )


@dataclass
class VideoRecord:
    frames: np.ndarray | None  # (T, H, W, 3) uint8, None when loaded without frames
    boxes: np.ndarray  # (T, 3, 4) float64 pixels
    env: EnvContext
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.boxes)

    @property
    def annotations(self) -> list[list[BoxAnnotation]]:
        return [
            [BoxAnnotation(i, tuple(float(v) for v in frame_boxes[i])) for i in range(len(frame_boxes))]
            for frame_boxes in self.boxes
        ]


@dataclass
class Dataset:
    manifest: DatasetManifest
    videos: list[VideoRecord] = field(default_factory=list)
    root: Path | None = None

    @property
    def frame_size(self) -> tuple[int, int]:
        """``(width, height)`` shared by every video."""
        kind = self.manifest.name.env_kind
        if kind is EnvKind.PLAIN:
            return EnvContext.plain().width, EnvContext.plain().height
        return EnvContext.border(0).width, EnvContext.border(0).height

    def __len__(self):
        return len(self.videos)


class SampleWindow(NamedTuple):
    video_index: int
    start: int  # index of the first target frame
    reference_frames: np.ndarray | None  # (T_REF, H, W, 3)
    reference_boxes: np.ndarray  # (T_REF, 3, 4)
    target_boxes: np.ndarray  # (T_PRED or 2 * T_PRED, 3, 4)
    env: EnvContext


def render_frame(world: WorldState) -> np.ndarray:
    env = world.env
    h, w = env.height, env.width
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    # pixel (row, col) is sampled at its center (col + 0.5, row + 0.5)
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    x_min, y_min, x_max, y_max = env.bounds
    outside = (xs[None, :] < x_min) | (xs[None, :] > x_max) | (ys[:, None] < y_min) | (ys[:, None] > y_max)
    img[outside] = BORDER_COLOR
    bar = env.bar_interval
    if bar is not None:
        img[:, (xs >= bar[0]) & (xs < bar[1])] = BAR_COLOR
    for i, ball in enumerate(world.balls):
        cx, cy = ball.position
        disk = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= ball.radius ** 2
        img[disk] = BALL_COLORS[i % len(BALL_COLORS)]
    return img


def box_array(world: WorldState) -> np.ndarray:
    w, h = world.env.width, world.env.height
    out = np.empty((len(world.balls), 4))
    for i, ball in enumerate(world.balls):
        cx, cy = ball.position
        r = ball.radius
        out[i] = (max(cx - r, 0.0), max(cy - r, 0.0), min(cx + r, float(w)), min(cy + r, float(h)))
    return out


def annotate(world: WorldState) -> list[BoxAnnotation]:
    return [BoxAnnotation(i, tuple(float(v) for v in b)) for i, b in enumerate(box_array(world))]


def video_seed(global_seed: int, split: str, video_index: int) -> int:
    """Stable per-video seed from ``(global_seed, split, video_index)``."""
    split_code = {"train": 0, "test": 1}[split]
    ss = np.random.SeedSequence([global_seed, split_code, video_index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_video(manifest: DatasetManifest, video_index: int, render: bool = True) -> VideoRecord:
    seed = video_seed(manifest.global_seed, manifest.split, video_index)
    rng = np.random.default_rng(seed)
    env = sample_env(manifest.name.env_kind, rng)
    states = simulate(int(rng.integers(2**31)), env, manifest.n_frames)
    boxes = np.stack([box_array(s) for s in states])
    frames = np.stack([render_frame(s) for s in states]) if render else None
    return VideoRecord(frames, boxes, env, seed)


def build_dataset(manifest: DatasetManifest, render: bool = True) -> Dataset:
    """In-memory equivalent of :func:`generate_dataset` followed by :func:`load_dataset`."""
    return Dataset(manifest, [make_video(manifest, i, render) for i in range(manifest.video_count)])


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def _write_video(args) -> str:
    manifest, index, out_dir = args
    video = make_video(manifest, index)
    vdir = Path(out_dir) / f"video_{index:04d}"
    try:
        vdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(video.frames):
            Image.fromarray(frame).save(vdir / f"frame_{t:03d}.png", optimize=False)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {vdir}: {exc}") from exc
    _write_json(
        vdir / "annotations.json",
        {"seed": video.seed, "env": video.env.to_dict(), "boxes": video.boxes.tolist()},
    )
    return str(vdir)


def generate_dataset(manifest: DatasetManifest, out_dir: str | os.PathLike, workers: int = 1) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {out}: {exc}") from exc
    jobs = [(manifest, i, str(out)) for i in range(manifest.video_count)]
    if workers > 1 and jobs:
        with ProcessPoolExecutor(workers) as pool:
            for _ in pool.map(_write_video, jobs, chunksize=8):
                pass
    else:
        for job in jobs:
            _write_video(job)
    _write_json(out / "manifest.json", manifest.to_dict())
    log.info("wrote %d videos to %s", manifest.video_count, out)
    return out


def load_video(vdir: Path, with_frames: bool = True) -> VideoRecord:
    try:
        meta = json.loads((vdir / "annotations.json").read_text())
        boxes = np.asarray(meta["boxes"], dtype=np.float64)
        frames = None
        if with_frames:
            frames = np.stack(
                [np.asarray(Image.open(vdir / f"frame_{t:03d}.png").convert("RGB")) for t in range(len(boxes))]
            )
    except OSError as exc:
        raise DatasetIOError(f"cannot read {vdir}: {exc}") from exc
    return VideoRecord(frames, boxes, EnvContext.from_dict(meta["env"]), int(meta["seed"]))


def load_dataset(path: str | os.PathLike, with_frames: bool = True) -> Dataset:
    root = Path(path)
    try:
        manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest in {root}: {exc}") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {manifest.format_version} in {root}")
    videos = [load_video(root / f"video_{i:04d}", with_frames) for i in range(manifest.video_count)]
    return Dataset(manifest, videos, root)


def window_starts(n_frames: int, mode: str, t_ref: int = T_REF, t_pred: int = T_PRED) -> range:
    horizon = {"train": t_pred, "eval": 2 * t_pred}[mode]
    if n_frames < t_ref + horizon:
        raise ValueError(f"video of {n_frames} frames is shorter than {t_ref + horizon} needed for {mode} windows")
    return range(t_ref, n_frames - horizon + 1)


def iter_windows(dataset: Dataset, mode: str, t_ref: int = T_REF, t_pred: int = T_PRED) -> Iterator[SampleWindow]:
    horizon = {"train": t_pred, "eval": 2 * t_pred}[mode]
    for vi, video in enumerate(dataset.videos):
        for start in window_starts(video.n_frames, mode, t_ref, t_pred):
            frames = None if video.frames is None else video.frames[start - t_ref : start]
            yield SampleWindow(
                vi,
                start,
                frames,
                video.boxes[start - t_ref : start],
                video.boxes[start : start + horizon],
                video.env,
            )


__all__ = [
    "N_BALLS",
    "BoxAnnotation",
    "Dataset",
    "DatasetIOError",
    "DatasetManifest",
    "DatasetName",
    "SampleWindow",
    "VideoRecord",
    "annotate",
    "build_dataset",
    "generate_dataset",
    "iter_windows",
    "load_dataset",
    "render_frame",
    "video_seed",
    "window_starts",
]
