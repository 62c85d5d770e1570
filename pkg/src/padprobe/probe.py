"""Position-information probes: feature uniformity, the padding x input x bias
grid, the constant-prediction baseline, and heatmap export."""
from __future__ import annotations

import itertools
import json
import logging
import os
import shlex
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import Backbone, BackboneConfig, InputMode, PaddingMode
from .dataset import T_PRED, T_REF, Dataset, DatasetManifest, DatasetName, build_dataset, iter_windows, render_frame
from .evaluator import (
    MetricsReport,
    TrialResult,
    aggregate_by_cell,
    eval_targets,
    p_metrics,
    step_sq_errors,
    write_aggregate_csv,
    write_results_csv,
)
from .model import boxes_to_cxcywh
from .sim_core import EnvContext, simulate

log = logging.getLogger(__name__)

UNIFORMITY_TOLERANCE = 1e-5
COLLAPSE_FRACTION = 0.5
INPUT_ORDER = [InputMode.VISUAL, InputMode.ALL_ZEROS, InputMode.ALL_ONES, InputMode.FIXED_RANDOM, InputMode.RANDOM]
PADDING_ORDER = [PaddingMode.ZERO, PaddingMode.REFLECT, PaddingMode.REPLICATE, PaddingMode.CIRCULAR]


class UniformityStats(NamedTuple):
    channel_deviation: np.ndarray  # (C,) max |value - channel mean| over cells
    mean_variance: float
    is_uniform: bool

    @property
    def max_deviation(self) -> float:
        return float(self.channel_deviation.max()) if self.channel_deviation.size else 0.0


def _as_array(feature_map) -> np.ndarray:
    if isinstance(feature_map, torch.Tensor):
        feature_map = feature_map.detach().cpu()
    return np.asarray(feature_map, dtype=np.float64)


def uniformity(feature_map, tolerance: float) -> UniformityStats:
    """Spatial uniformity of a (C, H, W) map; uniform iff every channel deviates by at most ``tolerance``."""
    fmap = _as_array(feature_map)
    if fmap.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {fmap.shape}")
    if not np.isfinite(fmap).all():
        raise ValueError("feature map has non-finite values")
    flat = fmap.reshape(fmap.shape[0], -1)
    dev = np.abs(flat - flat.mean(axis=1, keepdims=True)).max(axis=1)
    return UniformityStats(dev, float(flat.var(axis=1).mean()), bool(dev.max() <= tolerance))


def relative_tolerance(feature_map, tolerance: float = UNIFORMITY_TOLERANCE) -> float:
    """Absolute threshold for ``uniformity``: ``tolerance`` times the map's value scale."""
    scale = float(np.abs(_as_array(feature_map)).max()) if np.size(feature_map) else 0.0
    return tolerance * max(scale, 1e-12)


def is_uniform(feature_map, tolerance: float = UNIFORMITY_TOLERANCE) -> bool:
    return uniformity(feature_map, relative_tolerance(feature_map, tolerance)).is_uniform


def sample_frames(seed: int, env: EnvContext | None = None, t_ref: int = T_REF) -> np.ndarray:
    """``t_ref`` consecutive rendered frames of a fresh clip: (1, T, H, W, 3) uint8."""
    env = env or EnvContext.plain()
    states = simulate(seed, env, t_ref)
    return np.stack([render_frame(s) for s in states])[None]


@torch.no_grad()
def backbone_output(
    config: BackboneConfig,
    seed: int,
    frames: np.ndarray | None = None,
    frame_size: tuple[int, int] = (64, 64),
) -> np.ndarray:
    """(C, H', W') hourglass output of an untrained backbone with seeded weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = Backbone(config, frame_size, seed=seed).double()
    frames_t = None if frames is None else torch.from_numpy(np.asarray(frames))
    return net(frames_t, batch=1)[0].numpy()


def uniformity_matrix(
    seed: int = 0,
    feature_channels: int = 64,
    tolerance: float = UNIFORMITY_TOLERANCE,
) -> dict[tuple[InputMode, PaddingMode, bool], bool]:
    """is_uniform for every (input, padding, bias) cell on an untrained backbone."""
    frames = sample_frames(seed)
    table = {}
    for bias in (True, False):
        for inp in INPUT_ORDER:
            for pad in PADDING_ORDER:
                cfg = BackboneConfig(padding_mode=pad, use_bias=bias, input_mode=inp, feature_channels=feature_channels)
                fmap = backbone_output(cfg, seed, frames if inp is InputMode.VISUAL else None)
                table[(inp, pad, bias)] = is_uniform(fmap, tolerance)
    return table


def expected_uniform(inp: InputMode, pad: PaddingMode, bias: bool) -> bool:
    """Cells where a constant hourglass input stays constant (the failure cells)."""
    inp, pad = InputMode(inp), PaddingMode(pad)
    if inp in (InputMode.ALL_ZEROS, InputMode.ALL_ONES) and pad is not PaddingMode.ZERO:
        return True
    return inp is InputMode.ALL_ZEROS and pad is PaddingMode.ZERO and not bias


def format_matrix(table: dict[tuple[InputMode, PaddingMode, bool], bool]) -> str:
    lines = []
    for bias in (True, False):
        lines.append(f"bias={'on' if bias else 'off'}")
        lines.append("input".ljust(14) + "".join(p.value.ljust(11) for p in PADDING_ORDER))
        for inp in INPUT_ORDER:
            cells = "".join(("uniform" if table[(inp, p, bias)] else "varying").ljust(11) for p in PADDING_ORDER)
            lines.append(inp.value.ljust(14) + cells)
    return "\n".join(lines)


def constant_prediction_oracle(train: Dataset, evaluation: Dataset, t_pred: int = T_PRED) -> tuple[float, float]:
    """Best input-independent predictor: per-step mean center over the training split."""
    mean_centers = eval_targets(train, t_pred).mean(axis=(0, 2))  # (2 * t_pred, 2)
    truth = eval_targets(evaluation, t_pred)
    pred = np.broadcast_to(mean_centers[None, :, None, :], truth.shape)
    return p_metrics(step_sq_errors(pred, truth), t_pred)


def export_feature_figures(feature_map, out_dir: str | os.PathLike, prefix: str = "channel", upscale: int = 4) -> list[Path]:
    """One grayscale PNG per channel, min-max normalized; constant channels come out mid-gray."""
    fmap = _as_array(feature_map)
    if not np.isfinite(fmap).all():
        raise ValueError("feature map has non-finite values")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, chan in enumerate(fmap):
        lo, hi = chan.min(), chan.max()
        if hi > lo:
            img = np.round((chan - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img = np.full(chan.shape, 128, dtype=np.uint8)
        if upscale > 1:
            img = np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))
        path = out / f"{prefix}_{c:03d}.png"
        Image.fromarray(img, mode="L").save(path)
        paths.append(path)
    return paths


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetName = DatasetName.SIMB
    input_mode: InputMode = InputMode.VISUAL
    padding_mode: PaddingMode = PaddingMode.ZERO
    padding_size: int = 1
    use_bias: bool = True
    trial_seed: int = 0
    tier: str = "smoke"

    def __post_init__(self):
        object.__setattr__(self, "dataset", DatasetName(self.dataset))
        object.__setattr__(self, "input_mode", InputMode(self.input_mode))
        object.__setattr__(self, "padding_mode", PaddingMode(self.padding_mode))

    @property
    def cell(self) -> tuple:
        return (self.dataset.value, self.input_mode.value, self.padding_mode.value, self.padding_size, self.use_bias)

    def backbone(self, feature_channels: int = 64) -> BackboneConfig:
        return BackboneConfig(
            padding_mode=self.padding_mode,
            padding_size=self.padding_size,
            use_bias=self.use_bias,
            input_mode=self.input_mode,
            feature_channels=feature_channels,
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.value,
            "input_mode": self.input_mode.value,
            "padding_mode": self.padding_mode.value,
            "padding_size": self.padding_size,
            "use_bias": self.use_bias,
            "trial_seed": self.trial_seed,
            "tier": self.tier,
        }


_BOOL = {"true": True, "on": True, "1": True, "yes": True, "false": False, "off": False, "0": False, "no": False}
_KEYS = {"dataset", "input", "input_mode", "padding", "padding_mode", "padding_size", "bias"}


def parse_grid_spec(text: str, tier: str = "smoke") -> list[ExperimentConfig]:
    """Parse a grid spec: one line per cell group, ``key=value`` pairs.

    Comma-separated values expand to their cartesian product, e.g.::

        dataset=simb input=all_zeros,all_ones padding=zero,reflect bias=on,off

    Missing keys take the :class:`ExperimentConfig` defaults. ``#`` starts a comment.
    """
    configs: list[ExperimentConfig] = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        options: dict[str, list[str]] = {}
        for token in shlex.split(line):
            if "=" not in token:
                raise ValueError(f"line {lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            key = key.strip().lower()
            if key not in _KEYS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            key = {"input": "input_mode", "padding": "padding_mode"}.get(key, key)
            options[key] = [v.strip() for v in value.split(",") if v.strip()]
        names = list(options)
        for combo in itertools.product(*(options[k] for k in names)):
            kw = dict(zip(names, combo))
            try:
                cfg = ExperimentConfig(
                    dataset=DatasetName.parse(kw.get("dataset", "simb")),
                    input_mode=InputMode(kw.get("input_mode", "visual").lower()),
                    padding_mode=PaddingMode(kw.get("padding_mode", "zero").lower()),
                    padding_size=int(kw.get("padding_size", 1)),
                    use_bias=_BOOL[kw.get("bias", "on").lower()],
                    tier=tier,
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
            if cfg.cell not in seen:
                seen.add(cfg.cell)
                configs.append(cfg)
    return configs


def trial_seed(base_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([base_seed, trial]).generate_state(1)[0] % (2**31))


class DataSource:
    """Caches train/test splits per dataset name for a grid run."""

    def __init__(self, root: str | os.PathLike | None = None, train_videos: int = 200, test_videos: int = 50, seed: int = 0):
        self.root = None if root is None else Path(root)
        self.train_videos = train_videos
        self.test_videos = test_videos
        self.seed = seed
        self._cache: dict[tuple, Dataset] = {}

    def get(self, name: DatasetName, split: str, with_frames: bool) -> Dataset:
        key = (name, split, with_frames)
        if key in self._cache:
            return self._cache[key]
        count = self.train_videos if split == "train" else self.test_videos
        manifest = DatasetManifest(name, split, count, self.seed)
        if self.root is not None:
            from .dataset import generate_dataset, load_dataset

            path = self.root / name.value / split
            if not (path / "manifest.json").exists():
                generate_dataset(manifest, path)
            ds = load_dataset(path, with_frames=with_frames)
            if ds.manifest != manifest:
                raise ValueError(f"dataset at {path} has manifest {ds.manifest}, expected {manifest}")
        else:
            ds = build_dataset(manifest, render=with_frames)
        self._cache[key] = ds
        return ds


def flag_collapsed(p1: float, oracle_p1: float) -> bool:
    return p1 >= COLLAPSE_FRACTION * oracle_p1


def results_table(reports: Sequence[MetricsReport], oracle_p1: dict[str, float]) -> str:
    """Markdown table in the P1/P2-per-padding layout, collapsed cells in bold."""
    lines = []
    datasets = sorted({r.dataset for r in reports})
    for ds in datasets:
        for bias in (True, False):
            for size in sorted({r.padding_size for r in reports if r.dataset == ds and r.bias == bias}):
                cells = {(r.input_mode, r.padding_mode): r for r in reports
                         if r.dataset == ds and r.bias == bias and r.padding_size == size}
                if not cells:
                    continue
                pads = [p.value for p in PADDING_ORDER if any(k[1] == p.value for k in cells)]
                inputs = [i.value for i in INPUT_ORDER if any(k[0] == i.value for k in cells)]
                lines.append(f"### {ds}, bias {'on' if bias else 'off'}, padding size {size}")
                lines.append("")
                lines.append("| input | " + " | ".join(f"{p} P1 | {p} P2" for p in pads) + " |")
                lines.append("|---|" + "---|---|" * len(pads))
                for inp in inputs:
                    row = [inp]
                    for pad in pads:
                        rep = cells.get((inp, pad))
                        if rep is None:
                            row += ["", ""]
                            continue
                        p1 = f"{rep.p1_mean:.2f}±{rep.p1_std:.2f}"
                        p2 = f"{rep.p2_mean:.2f}±{rep.p2_std:.2f}"
                        if ds in oracle_p1 and flag_collapsed(rep.p1_mean, oracle_p1[ds]):
                            p1, p2 = f"**{p1}**", f"**{p2}**"
                        row += [p1, p2]
                    lines.append("| " + " | ".join(row) + " |")
                lines.append("")
    for ds, value in sorted(oracle_p1.items()):
        lines.append(f"constant-prediction oracle P1 on {ds}: {value:.2f}; bold = P1 >= {COLLAPSE_FRACTION} x oracle")
    return "\n".join(lines) + "\n"


def run_cell(cfg: ExperimentConfig, data: DataSource, iterations: int, feature_channels: int = 64,
             trial: int = 0, base_seed: int = 0, ckpt_dir: Path | None = None) -> TrialResult:
    from .evaluator import evaluate
    from .trainer import TrainConfig, train

    visual = cfg.input_mode is InputMode.VISUAL
    seed = trial_seed(base_seed, trial)
    tcfg = TrainConfig(iterations=iterations, backbone=cfg.backbone(feature_channels), seed=seed, tier=cfg.tier)
    ckpt = train(tcfg, data.get(cfg.dataset, "train", visual), out_dir=ckpt_dir)
    p1, p2 = evaluate(ckpt, data.get(cfg.dataset, "test", visual))
    return TrialResult(*cfg.cell, trial, p1, p2)


def run_grid(
    grid: Sequence[ExperimentConfig],
    trials: int,
    out_dir: str | os.PathLike,
    data: DataSource | None = None,
    iterations: int | None = None,
    feature_channels: int = 64,
    base_seed: int = 0,
    save_checkpoints: bool = False,
    progress: Callable[[str], None] | None = None,
    resume: bool = True,
) -> tuple[list[TrialResult], list[MetricsReport]]:
    """Train and evaluate every cell x trial; writes results.csv, aggregate.csv, table.md.

    A failing cell is logged to failures.jsonl and the grid moves on. With
    ``resume`` set, rows already in results.csv are kept and not rerun.
    """
    from .evaluator import read_results_csv
    from .trainer import TIERS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or DataSource()
    results_path = out / "results.csv"
    settings = {
        "iterations": iterations,
        "tiers": sorted({cfg.tier for cfg in grid}),
        "feature_channels": feature_channels,
        "base_seed": base_seed,
        "train_videos": data.train_videos,
        "test_videos": data.test_videos,
        "data_seed": data.seed,
    }
    settings_path = out / "grid.json"
    results: list[TrialResult] = []
    if resume and results_path.exists():
        previous = json.loads(settings_path.read_text()) if settings_path.exists() else None
        if previous != settings:
            raise ValueError(f"{out} holds results from different settings {previous}; use a fresh out dir")
        results = read_results_csv(results_path)
    settings_path.write_text(json.dumps(settings, indent=1) + "\n")
    done = {(r.cell, r.trial) for r in results}
    for cfg in grid:
        n_iter = iterations if iterations is not None else TIERS[cfg.tier]
        for trial in range(trials):
            if (cfg.cell, trial) in done:
                continue
            tag = "/".join(str(v) for v in cfg.cell) + f"/trial{trial}"
            try:
                ckpt_dir = out / "checkpoints" / tag.replace("/", "_") if save_checkpoints else None
                res = run_cell(cfg, data, n_iter, feature_channels, trial, base_seed, ckpt_dir)
            except Exception as exc:  # noqa: BLE001 - recorded, grid continues
                log.error("cell %s failed: %s", tag, exc)
                with open(out / "failures.jsonl", "a") as fh:
                    fh.write(json.dumps({"cell": tag, "error": repr(exc), "trace": traceback.format_exc()}) + "\n")
                continue
            results.append(res)
            write_results_csv(results_path, results)
            if progress is not None:
                progress(f"{tag} p1={res.p1:.2f} p2={res.p2:.2f}")
    reports = aggregate_by_cell(results)
    write_aggregate_csv(out / "aggregate.csv", reports)
    oracle = {}
    for name in sorted({r.dataset for r in results}):
        dsname = DatasetName(name)
        oracle[name] = constant_prediction_oracle(data.get(dsname, "train", False), data.get(dsname, "test", False))[0]
    (out / "oracle.json").write_text(json.dumps(oracle, indent=1) + "\n")
    (out / "table.md").write_text(results_table(reports, oracle))
    return results, reports
