"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 3 to 5 read the grid outputs under ``results/`` written by
``grids/run_acceptance_grids.sh``; a missing or incomplete grid is reported as
a failure with the reason. Run with ``pytest tests/test_acceptance.py`` (the
lines are repeated in the terminal summary) or ``python3 tests/test_acceptance.py``.
"""
import hashlib
import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from _checks import containment_violations, energy, overlap_violations  # noqa: E402
from padprobe.backbone import BackboneConfig, InputMode, PaddingMode, hourglass_refine  # noqa: E402
from padprobe.dataset import (  # noqa: E402
    DatasetManifest,
    DatasetName,
    box_array,
    build_dataset,
    generate_dataset,
    make_video,
    video_seed,
)
from padprobe.evaluator import aggregate_by_cell, eval_targets, p_metrics, read_results_csv, step_sq_errors  # noqa: E402
from padprobe.interaction import roi_pool  # noqa: E402
from padprobe.model import DynamicsModel  # noqa: E402
from padprobe.probe import (  # noqa: E402
    INPUT_ORDER,
    PADDING_ORDER,
    backbone_output,
    constant_prediction_oracle,
    expected_uniform,
    flag_collapsed,
    is_uniform,
    sample_frames,
    uniformity,
    uniformity_matrix,
)
from padprobe.sim_core import EnvKind, init_world, sample_env, simulate, step  # noqa: E402

RESULTS = Path(__file__).resolve().parent.parent / "results"
LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


def load_grid(name):
    """(reports keyed by cell, oracle p1 per dataset, grid settings) or a reason string."""
    root = RESULTS / name
    missing = [f for f in ("results.csv", "oracle.json", "grid.json") if not (root / f).exists()]
    if missing:
        return f"no grid output in {root} ({', '.join(missing)} missing); run grids/run_acceptance_grids.sh"
    reports = {(r.dataset, r.input_mode, r.padding_mode, r.padding_size, r.bias): r
               for r in aggregate_by_cell(read_results_csv(root / "results.csv"))}
    return reports, json.loads((root / "oracle.json").read_text()), json.loads((root / "grid.json").read_text())


def expected_cells(spec_name):
    from padprobe.probe import parse_grid_spec

    grid = parse_grid_spec((Path(__file__).resolve().parent.parent / "grids" / spec_name).read_text())
    return [c.cell for c in grid]


def incomplete(reports, cells, trials=3):
    short = [c for c in cells if c not in reports or reports[c].trials < trials]
    return f"{len(short)}/{len(cells)} cells lack {trials} trials (grid still running or failed)" if short else None


def tier_note(settings):
    return f"tier {'/'.join(settings['tiers'])}, {settings['iterations']} it, C={settings['feature_channels']}"


# ------------------------------------------------------------------ criterion 1


def test_criterion_1_uniformity_matrix():
    table = uniformity_matrix(seed=0, feature_channels=16)
    matches = sum(v == expected_uniform(*k) for k, v in table.items())
    report(1, len(table) == 40 and matches == 40, f"{matches}/{len(table)} cells match")


# ------------------------------------------------------------------ criterion 2


def test_criterion_2_constant_fixpoint():
    rng = np.random.default_rng(2)
    worst, cases = 0.0, 0
    for draw in range(100):
        values = (0.0, 1.0, float(rng.uniform(-3, 3)))
        for value, mode, bias in itertools.product(values, PaddingMode, (True, False)):
            if mode is PaddingMode.ZERO:
                continue
            x = torch.full((1, 16, 16, 16), value)
            y = hourglass_refine(x, BackboneConfig(padding_mode=mode, use_bias=bias, feature_channels=16), seed=draw)[0]
            scale = y.abs().max().item()
            if scale > 0:
                worst = max(worst, uniformity(y, 0.0).max_deviation / scale)
            cases += 1
    nonzero = 0
    for draw in range(100):
        y = hourglass_refine(torch.zeros(1, 16, 16, 16), BackboneConfig(padding_mode="zero", use_bias=False,
                                                                         feature_channels=16), seed=draw)
        nonzero += int(torch.count_nonzero(y))
    ok = worst <= 1e-5 and nonzero == 0
    report(2, ok, f"{cases} constant cases, worst relative deviation {worst:.2e}; "
                  f"zero/no-bias nonzero outputs {nonzero}")


# ------------------------------------------------------------------ criterion 3


def brute_force_oracle(train, test, candidates=4001):
    # per step and axis, scan a grid of constants over [0, 1] and keep the best on train
    targets = eval_targets(train)  # (windows, steps, balls, 2)
    grid = np.linspace(0.0, 1.0, candidates)
    flat = targets.transpose(1, 3, 0, 2).reshape(targets.shape[1], 2, -1)
    m1, m2 = flat.mean(-1), (flat ** 2).mean(-1)
    mse = m2[..., None] - 2 * m1[..., None] * grid + grid ** 2
    best = grid[mse.argmin(-1)]  # (steps, 2)
    truth = eval_targets(test)
    pred = np.broadcast_to(best[None, :, None, :], truth.shape)
    return p_metrics(step_sq_errors(pred, truth))


def test_criterion_3_collapse_vs_success():
    grid = load_grid("simb_table")
    if isinstance(grid, str):
        report(3, False, grid)
    reports, oracle, settings = grid
    cells = expected_cells("simb_table.cfg")
    gap = incomplete(reports, cells)
    if gap:
        report(3, False, gap)
    train = build_dataset(DatasetManifest("SimB", "train", settings["train_videos"], settings["data_seed"]), False)
    test = build_dataset(DatasetManifest("SimB", "test", settings["test_videos"], settings["data_seed"]), False)
    brute = brute_force_oracle(train, test)[0]
    closed = constant_prediction_oracle(train, test)[0]
    oracle_p1 = oracle["SimB"]
    oracle_ok = math.isclose(brute, closed, rel_tol=1e-3) and math.isclose(closed, oracle_p1, rel_tol=1e-9)
    fail_cells = [reports[c] for c in cells if expected_uniform(c[1], c[2], c[4])]
    ok_cells = [reports[c] for c in cells if not expected_uniform(c[1], c[2], c[4])]
    worst_success = max(ok_cells, key=lambda r: r.p1_mean)
    best_failure = min(fail_cells, key=lambda r: r.p1_mean)
    ratio = best_failure.p1_mean / worst_success.p1_mean
    off = [r for r in fail_cells if abs(r.p1_mean - oracle_p1) > 0.2 * oracle_p1]
    ok = oracle_ok and ratio >= 5 and not off
    name = lambda r: f"{r.input_mode}/{r.padding_mode}/{'bias' if r.bias else 'nobias'}"  # noqa: E731
    report(3, ok, f"{tier_note(settings)}; oracle p1 {oracle_p1:.1f} (brute force {brute:.1f}); "
                  f"worst success {name(worst_success)} {worst_success.p1_mean:.1f}, best failure "
                  f"{name(best_failure)} {best_failure.p1_mean:.1f}, ratio {ratio:.2f} (need 5); "
                  f"{len(off)}/{len(fail_cells)} failure cells outside oracle ±20%")


# ------------------------------------------------------------------ criterion 4


def test_criterion_4_padding_size():
    grid = load_grid("padding_size")
    if isinstance(grid, str):
        report(4, False, grid)
    reports, oracle, settings = grid
    cells = expected_cells("padding_size.cfg")
    gap = incomplete(reports, cells)
    if gap:
        report(4, False, gap)
    collapsed = [c for c in cells if flag_collapsed(reports[c].p1_mean, oracle[c[0]])]
    spread = []
    for mode in PADDING_ORDER:
        group = [reports[c] for c in cells if c[2] == mode.value]
        for a, b in itertools.combinations(group, 2):
            allowed = 2 * max(a.p1_std, b.p1_std)
            if abs(a.p1_mean - b.p1_mean) > allowed:
                spread.append(f"{mode.value} size {a.padding_size} vs {b.padding_size}")
    ok = not collapsed and not spread
    p1s = ", ".join(f"{c[2]}/{c[3]} {reports[c].p1_mean:.1f}" for c in cells)
    report(4, ok, f"{tier_note(settings)}; collapse threshold {0.5 * oracle['SimB']:.1f}; "
                  f"{len(collapsed)}/{len(cells)} collapsed; {len(spread)} size pairs beyond 2 std; p1: {p1s}")


# ------------------------------------------------------------------ criterion 5


def test_criterion_5_environment_context():
    grid = load_grid("environments")
    if isinstance(grid, str):
        report(5, False, grid)
    reports, _, settings = grid
    cells = expected_cells("environments.cfg")
    gap = incomplete(reports, cells)
    if gap:
        report(5, False, gap)
    get = lambda ds, inp: reports[(ds, inp, "zero", 1, True)]  # noqa: E731
    problems = []
    for ds in ("SimB-Border", "SimB-Split"):
        vis = get(ds, "visual")
        for inp in ("all_zeros", "fixed_random"):
            other = get(ds, inp)
            if not (vis.p1_mean < other.p1_mean and vis.p2_mean < other.p2_mean):
                problems.append(f"{ds} visual not better than {inp}")
    for inp in ("all_zeros", "fixed_random"):
        if not get("SimB-Split", inp).p1_mean > get("SimB-Border", inp).p1_mean:
            problems.append(f"{inp} split not worse than border")
    vals = "; ".join(f"{c[0]}/{c[1]} {reports[c].p1_mean:.1f}/{reports[c].p2_mean:.1f}" for c in cells)
    report(5, not problems, f"{tier_note(settings)}; p1/p2: {vals}" + (f"; {', '.join(problems)}" if problems else ""))


# ------------------------------------------------------------------ criterion 6


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_6_simulator(tmp_path):
    # energy: 10 worlds x 10^4 steps over all environment kinds
    rng = np.random.default_rng(6)
    worst, steps = 0.0, 0
    for k in range(10):
        env = sample_env(list(EnvKind)[k % 3], rng)
        w = init_world(int(rng.integers(2**31)), env)
        e = energy(w)
        for _ in range(10_000):
            w = step(w)
            e_next = energy(w)
            worst = max(worst, abs(e_next - e) / e)
            e = e_next
            steps += 1
    # containment and overlap over 1000 videos, replaying the generator's seed path
    violations, videos = 0, 0
    for name, count in ((DatasetName.SIMB, 334), (DatasetName.SIMB_BORDER, 333), (DatasetName.SIMB_SPLIT, 333)):
        m = DatasetManifest(name, "train", count, 6)
        for i in range(count):
            vrng = np.random.default_rng(video_seed(6, "train", i))
            env = sample_env(name.env_kind, vrng)
            states = simulate(int(vrng.integers(2**31)), env, m.n_frames)
            violations += sum(len(containment_violations(s)) + len(overlap_violations(s)) for s in states)
            if i == 0:
                assert np.array_equal(np.stack([box_array(s) for s in states]), make_video(m, 0, False).boxes)
            videos += 1
    same = True
    for name in DatasetName:
        m = DatasetManifest(name, "test", 3, 6)
        same &= _digest(generate_dataset(m, tmp_path / name.value / "a")) == \
            _digest(generate_dataset(m, tmp_path / name.value / "b"))
    ok = worst <= 1e-9 and violations == 0 and same
    report(6, ok, f"{steps} steps, worst relative energy change {worst:.1e}; {videos} videos, "
                  f"{violations} violations; regeneration byte-identical: {same}")


# ------------------------------------------------------------------ criterion 7


def brute_force_roi(fmap, box, k, downsample=4):
    # cells whose unit interval meets the bin; an empty bin takes the cell holding its start
    _, h, w = fmap.shape
    x0, y0, x1, y1 = (float(v) / downsample for v in box)
    out = np.empty((fmap.shape[0], k, k), fmap.dtype)

    def covered(lo, hi, n):
        cells = [i for i in range(n) if i < hi and i + 1 > lo]
        return cells or [min(max(math.floor(lo), 0), n - 1)]

    for by in range(k):
        rows = covered(y0 + by * (y1 - y0) / k, y0 + (by + 1) * (y1 - y0) / k, h)
        for bx in range(k):
            cols = covered(x0 + bx * (x1 - x0) / k, x0 + (bx + 1) * (x1 - x0) / k, w)
            for c in range(fmap.shape[0]):
                out[c, by, bx] = max(fmap[c, r, q] for r in rows for q in cols)
    return out


def test_criterion_7_roi_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for case in range(200):
        h, w = (int(v) for v in rng.integers(2, 25, size=2))
        fmap = rng.standard_normal((3, h, w))
        xs = np.sort(rng.uniform(-3, 4 * w + 3, 2))
        ys = np.sort(rng.uniform(-3, 4 * h + 3, 2))
        if case % 4 == 0:
            xs, ys = np.floor(xs), np.floor(ys)
        box = (xs[0], ys[0], max(xs[1], xs[0] + 0.25), max(ys[1], ys[0] + 0.25))
        k = int(rng.choice([1, 2, 4]))
        got = roi_pool(torch.from_numpy(fmap), box, roi_size=k).numpy()
        mismatches += int(not np.array_equal(got, brute_force_roi(fmap, box, k)))
    report(7, mismatches == 0, f"200 cases, {mismatches} mismatches")


# ------------------------------------------------------------------ criterion 8


def test_criterion_8_gradient_check():
    from test_trainer import gradient_check

    worst, sampled = gradient_check()
    report(8, worst <= 1e-3 and sampled > 0, f"{sampled} sampled parameters, worst relative excess {worst:.1e}")


# ------------------------------------------------------------------ criterion 9


def test_criterion_9_position_blindness():
    data = build_dataset(DatasetManifest("SimB", "test", 2, 9), render=False)
    a_boxes = torch.tensor(data.videos[0].boxes[:4])[None].float()
    b_boxes = torch.tensor(data.videos[1].boxes[20:24])[None].float()
    checked, broken = 0, []
    frames = sample_frames(9)
    for inp, pad, bias in itertools.product(INPUT_ORDER, PADDING_ORDER, (True, False)):
        cfg = BackboneConfig(padding_mode=pad, use_bias=bias, input_mode=inp, feature_channels=8)
        if not is_uniform(backbone_output(cfg, 9, frames)):
            continue
        torch.manual_seed(9)
        model = DynamicsModel(cfg, (64, 64), seed=9)
        with torch.no_grad():
            same = torch.equal(model(None, a_boxes, 40), model(None, b_boxes, 40))
        checked += 1
        if not same:
            broken.append(f"{InputMode(inp).value}/{PaddingMode(pad).value}/{bias}")
    ok = checked == 13 and not broken
    report(9, ok, f"{checked} uniform configs, {len(broken)} with differing rollouts {broken if broken else ''}".strip())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
