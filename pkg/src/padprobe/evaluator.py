"""Short/long-horizon rollout metrics (P1/P2) and trial aggregation."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .backbone import InputMode
from .dataset import T_PRED, T_REF, Dataset, iter_windows
from .model import DynamicsModel, boxes_to_cxcywh

METRIC_SCALE = 1000.0
RESULT_FIELDS = ["dataset", "input_mode", "padding_mode", "padding_size", "bias", "trial", "p1", "p2"]
AGGREGATE_FIELDS = [
    "dataset", "input_mode", "padding_mode", "padding_size", "bias", "trials",
    "p1_mean", "p1_std", "p2_mean", "p2_std",
]


def step_sq_errors(pred_centers: np.ndarray, true_centers: np.ndarray) -> np.ndarray:
    """Squared l2 center distance per (window, step, ball)."""
    return ((np.asarray(pred_centers) - np.asarray(true_centers)) ** 2).sum(-1)


def p_metrics(sq_err: np.ndarray, t_pred: int = T_PRED) -> tuple[float, float]:
    """``sq_err``: (windows, 2 * t_pred, balls) -> (p1, p2), each x1000."""
    sq_err = np.asarray(sq_err, dtype=np.float64)
    if sq_err.shape[1] != 2 * t_pred:
        raise ValueError(f"expected {2 * t_pred} steps, got {sq_err.shape[1]}")
    return (
        METRIC_SCALE * float(sq_err[:, :t_pred].mean()),
        METRIC_SCALE * float(sq_err[:, t_pred:].mean()),
    )


def eval_targets(dataset: Dataset, t_pred: int = T_PRED) -> np.ndarray:
    """Normalized ground-truth centers of every eval window: (N, 2 * t_pred, 3, 2)."""
    w, h = dataset.frame_size
    tgts = [win.target_boxes for win in iter_windows(dataset, "eval", T_REF, t_pred)]
    if not tgts:
        return np.zeros((0, 2 * t_pred, 3, 2))
    return boxes_to_cxcywh(torch.from_numpy(np.stack(tgts)), (w, h))[..., :2].numpy()


@torch.no_grad()
def predict_dataset(model: DynamicsModel, dataset: Dataset, t_pred: int = T_PRED, batch_size: int = 128) -> np.ndarray:
    """Predicted normalized centers for every eval window: (N, 2 * t_pred, 3, 2)."""
    if tuple(dataset.frame_size) != tuple(model.frame_size):
        raise ValueError(f"dataset resolution {dataset.frame_size} != checkpoint resolution {model.frame_size}")
    visual = model.config.input_mode is InputMode.VISUAL
    model.eval()
    out = []
    frames, refs = [], []

    def flush():
        f = torch.from_numpy(np.stack(frames)) if visual else None
        r = torch.from_numpy(np.stack(refs)).float()
        out.append(model(f, r, 2 * t_pred)[..., :2].double().numpy())
        frames.clear()
        refs.clear()

    for win in iter_windows(dataset, "eval", T_REF, t_pred):
        if visual:
            if win.reference_frames is None:
                raise ValueError("visual checkpoint needs a dataset loaded with frames")
            frames.append(win.reference_frames)
        refs.append(win.reference_boxes)
        if len(refs) == batch_size:
            flush()
    if refs:
        flush()
    if not out:
        return np.zeros((0, 2 * t_pred, 3, 2))
    return np.concatenate(out)


def evaluate(checkpoint, dataset: Dataset, t_pred: int = T_PRED, batch_size: int = 128) -> tuple[float, float]:
    model = checkpoint.model if hasattr(checkpoint, "model") else checkpoint
    pred = predict_dataset(model, dataset, t_pred, batch_size)
    return p_metrics(step_sq_errors(pred, eval_targets(dataset, t_pred)), t_pred)


@dataclass
class TrialResult:
    dataset: str
    input_mode: str
    padding_mode: str
    padding_size: int
    bias: bool
    trial: int
    p1: float
    p2: float

    @property
    def cell(self) -> tuple:
        return (self.dataset, self.input_mode, self.padding_mode, self.padding_size, self.bias)


@dataclass
class MetricsReport:
    dataset: str
    input_mode: str
    padding_mode: str
    padding_size: int
    bias: bool
    p1: list[float] = field(default_factory=list)
    p2: list[float] = field(default_factory=list)

    @staticmethod
    def _std(x) -> float:
        return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

    @property
    def trials(self) -> int:
        return len(self.p1)

    @property
    def p1_mean(self) -> float:
        return float(np.mean(self.p1))

    @property
    def p1_std(self) -> float:
        return self._std(self.p1)

    @property
    def p2_mean(self) -> float:
        return float(np.mean(self.p2))

    @property
    def p2_std(self) -> float:
        return self._std(self.p2)

    def row(self) -> dict:
        return {
            "dataset": self.dataset,
            "input_mode": self.input_mode,
            "padding_mode": self.padding_mode,
            "padding_size": self.padding_size,
            "bias": self.bias,
            "trials": self.trials,
            "p1_mean": self.p1_mean,
            "p1_std": self.p1_std,
            "p2_mean": self.p2_mean,
            "p2_std": self.p2_std,
        }


def aggregate(results: Sequence[TrialResult]) -> MetricsReport:
    if not results:
        raise ValueError("need at least one trial")
    cells = {r.cell for r in results}
    if len(cells) != 1:
        raise ValueError(f"cannot aggregate mixed configs: {sorted(cells)}")
    first = results[0]
    return MetricsReport(
        first.dataset, first.input_mode, first.padding_mode, first.padding_size, first.bias,
        [float(r.p1) for r in results], [float(r.p2) for r in results],
    )


def aggregate_by_cell(results: Iterable[TrialResult]) -> list[MetricsReport]:
    groups: dict[tuple, list[TrialResult]] = {}
    for r in results:
        groups.setdefault(r.cell, []).append(r)
    return [aggregate(g) for g in groups.values()]


def write_results_csv(path: str | os.PathLike, results: Iterable[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow({k: getattr(r, k) for k in RESULT_FIELDS})


def read_results_csv(path: str | os.PathLike) -> list[TrialResult]:
    with open(path, newline="") as fh:
        return [
            TrialResult(
                row["dataset"], row["input_mode"], row["padding_mode"], int(row["padding_size"]),
                row["bias"] in ("True", "true", "1"), int(row["trial"]), float(row["p1"]), float(row["p2"]),
            )
            for row in csv.DictReader(fh)
        ]


def write_aggregate_csv(path: str | os.PathLike, reports: Iterable[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=AGGREGATE_FIELDS)
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
