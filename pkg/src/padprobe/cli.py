"""Command-line entry point: generate, train, eval, probe, grid.

Every command that writes outputs also writes ``run-manifest.json`` next to
them. Passing that manifest back through ``--config`` reruns the command with
the same resolved options.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import BackboneConfig, InputMode, PaddingMode
from .dataset import DatasetIOError, DatasetManifest, DatasetName, generate_dataset, load_dataset

log = logging.getLogger("padprobe")

MANIFEST_NAME = "run-manifest.json"
DATA_ENV = "PADPROBE_DATA_DIR"
DATASET_CHOICES = ["simb", "simb-border", "simb-split"]
TIER_CHOICES = ["smoke", "desk", "paper"]


class CLIError(Exception):
    """A user-facing failure reported as one parsable line."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _HelpFormatter(argparse.HelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        if getattr(action, "deferred_required", False):
            return text
        if action.default is not argparse.SUPPRESS and action.option_strings and "%(default)" not in text:
            text = (text + " (default: %(default)s)").strip()
        return text


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise CLIError("usage", message)


# ---------------------------------------------------------------- config files


def _coerce(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("'\"")


def read_config(path: str | os.PathLike) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments, dashes or underscores in keys).

    A run-manifest is accepted too: its ``options`` block is used.
    """
    p = Path(path)
    if not p.exists():
        raise CLIError("config", f"config file not found: {p}")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CLIError("config", f"{p}: {exc}") from exc
        if isinstance(data.get("options"), dict):
            data = data["options"]
    else:
        data = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise CLIError("config", f"{p}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            data[key.strip()] = _coerce(value)
    return {k.replace("-", "_"): v for k, v in data.items()}


# ------------------------------------------------------------------- manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def artifact_hashes(root: Path, skip: tuple[str, ...] = (MANIFEST_NAME,)) -> dict[str, str]:
    """sha256 of every file below ``root``; large datasets hash as one digest of digests."""
    files = sorted(f for f in root.rglob("*") if f.is_file() and f.name not in skip)
    if len(files) > 200:
        combined = hashlib.sha256()
        for f in files:
            combined.update(f.relative_to(root).as_posix().encode())
            combined.update(sha256_file(f).encode())
        return {f"<{len(files)} files>": combined.hexdigest()}
    return {f.relative_to(root).as_posix(): sha256_file(f) for f in files}


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):
        return value.value
    return value


# resolved so a manifest replays from any working directory
PATH_OPTIONS = ("out", "spec", "checkpoint", "data_dir", "train_data", "test_data")


def write_run_manifest(out: Path, args: argparse.Namespace, seeds: dict, extra: dict | None = None) -> Path:
    options = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func", "config")}
    for key in PATH_OPTIONS:
        if options.get(key):
            options[key] = str(Path(options[key]).resolve())
    manifest = {
        "command": args.command,
        "options": options,
        "seeds": seeds,
        "argv": sys.argv[1:],
        "versions": {
            "padprobe": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": artifact_hashes(out),
    }
    if extra:
        manifest.update(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------- helpers


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _data_root(args) -> Path | None:
    root = args.data_dir or os.environ.get(DATA_ENV)
    return Path(root) if root else None


def _backbone_config(args) -> BackboneConfig:
    return BackboneConfig(
        padding_mode=PaddingMode(args.padding_mode),
        padding_size=args.padding_size,
        use_bias=args.bias,
        input_mode=InputMode(args.input_mode),
        feature_channels=args.feature_channels,
    )


def _iterations(args) -> int:
    from .trainer import TIERS

    return args.iterations if args.iterations is not None else TIERS[args.tier]


def _split_path(args, split: str) -> Path:
    explicit = getattr(args, f"{split}_data", None)
    if explicit:
        return Path(explicit)
    root = _data_root(args)
    if root is None:
        raise CLIError("missing-dataset", f"no --{split}-data given and neither --data-dir nor ${DATA_ENV} is set")
    return root / DatasetName.parse(args.dataset).value / split


def _load_split(path: Path, with_frames: bool):
    if not (path / "manifest.json").exists():
        raise CLIError("missing-dataset", f"no dataset at {path} (run `padprobe generate` first)")
    try:
        return load_dataset(path, with_frames=with_frames)
    except DatasetIOError as exc:
        raise CLIError("dataset-io", str(exc)) from exc


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    name = DatasetName.parse(args.dataset)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise CLIError("conflict", f"{out} is not empty; pass --overwrite to replace it")
    manifest = DatasetManifest(name, args.split, args.videos, args.seed)
    _progress(f"generating {args.videos} {name.value}/{args.split} videos into {out}")
    generate_dataset(manifest, out, workers=args.workers)
    write_run_manifest(out, args, {"global_seed": args.seed})
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, TrainingDiverged, train

    cfg = _backbone_config(args)
    train_path = _split_path(args, "train")
    dataset = _load_split(train_path, cfg.input_mode is InputMode.VISUAL)
    tcfg = TrainConfig(
        iterations=_iterations(args),
        dataset=str(train_path),
        backbone=cfg,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        tier=args.tier,
    )
    every = max(1, tcfg.iterations // 20)

    def progress(it, value):
        if it % every == 0 or it == tcfg.iterations - 1:
            _progress(f"iter {it + 1}/{tcfg.iterations} loss {value:.5f}")

    torch.set_num_threads(args.threads)
    try:
        ckpt = train(tcfg, dataset, out_dir=args.out, progress=progress)
    except TrainingDiverged as exc:
        raise CLIError("diverged", str(exc)) from exc
    out = Path(args.out)
    write_run_manifest(out, args, {"train_seed": args.seed, "model_seed": args.seed},
                       {"dataset_manifest": dataset.manifest.to_dict()})
    print(json.dumps({"checkpoint": str(ckpt.path), "final_loss": ckpt.losses[-1]}))
    return 0


def cmd_eval(args) -> int:
    from .evaluator import evaluate
    from .trainer import load_checkpoint

    ckpt_dir = Path(args.checkpoint)
    if not (ckpt_dir / "checkpoint.json").exists():
        raise CLIError("missing-checkpoint", f"no checkpoint at {ckpt_dir}")
    ckpt = load_checkpoint(ckpt_dir)
    dataset = _load_split(_split_path(args, "test"), ckpt.config.backbone.input_mode is InputMode.VISUAL)
    try:
        p1, p2 = evaluate(ckpt, dataset)
    except ValueError as exc:
        raise CLIError("mismatch", str(exc)) from exc
    result = {"p1": p1, "p2": p2, "checkpoint": str(ckpt_dir)}
    print(json.dumps(result))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(result, indent=1) + "\n")
        write_run_manifest(out, args, {"train_seed": ckpt.config.seed},
                           {"checkpoint_sha256": sha256_file(ckpt_dir / "checkpoint.pt")})
    return 0


def cmd_probe(args) -> int:
    from . import probe

    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if args.probe == "uniformity-matrix":
        table = probe.uniformity_matrix(seed=args.seed, feature_channels=args.feature_channels)
        text = probe.format_matrix(table)
        print(text.rstrip("\n"))
        mismatches = [k for k, v in table.items() if v != probe.expected_uniform(*k)]
        _progress(f"{len(table) - len(mismatches)}/{len(table)} cells match the expected uniform set")
        if out is not None:
            (out / "uniformity.txt").write_text(text)
            rows = [{"input_mode": i.value, "padding_mode": p.value, "bias": b, "uniform": v}
                    for (i, p, b), v in table.items()]
            (out / "uniformity.json").write_text(json.dumps(rows, indent=1) + "\n")
    elif args.probe == "oracle":
        name = DatasetName.parse(args.dataset)
        train = _load_split(_split_path(args, "train"), False)
        test = _load_split(_split_path(args, "test"), False)
        p1, p2 = probe.constant_prediction_oracle(train, test)
        result = {"dataset": name.value, "p1": p1, "p2": p2}
        print(json.dumps(result))
        if out is not None:
            (out / "oracle.json").write_text(json.dumps(result, indent=1) + "\n")
    elif args.probe == "figures":
        if out is None:
            raise CLIError("usage", "figures needs --out")
        fmap = probe.backbone_output(_backbone_config(args), args.seed, probe.sample_frames(args.seed))
        paths = probe.export_feature_figures(fmap, out, upscale=args.upscale)
        stats = probe.uniformity(fmap, probe.relative_tolerance(fmap))
        print(json.dumps({"figures": len(paths), "uniform": stats.is_uniform, "max_deviation": stats.max_deviation}))
    if out is not None:
        write_run_manifest(out, args, {"seed": args.seed})
    return 0


def cmd_grid(args) -> int:
    from .probe import DataSource, parse_grid_spec, run_grid

    spec = Path(args.spec)
    if not spec.exists():
        raise CLIError("config", f"grid spec not found: {spec}")
    try:
        grid = parse_grid_spec(spec.read_text(), tier=args.tier)
    except ValueError as exc:
        raise CLIError("config", f"{spec}: {exc}") from exc
    if not grid:
        raise CLIError("config", f"{spec} defines no cells")
    torch.set_num_threads(args.threads)
    data = DataSource(_data_root(args), args.train_videos, args.test_videos, args.data_seed)
    out = Path(args.out)
    _progress(f"grid: {len(grid)} cells x {args.trials} trials, {_iterations(args)} iterations each")
    run_grid(grid, args.trials, out, data, iterations=_iterations(args), feature_channels=args.feature_channels,
             base_seed=args.seed, save_checkpoints=args.save_checkpoints, progress=_progress, resume=args.resume)
    (out / spec.name).write_text(spec.read_text())
    write_run_manifest(out, args, {"base_seed": args.seed, "data_seed": args.data_seed})
    print(out / "results.csv")
    return 0


# -------------------------------------------------------------------- parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-mode", choices=[m.value for m in InputMode], default="visual")
    p.add_argument("--padding-mode", choices=[m.value for m in PaddingMode], default="zero")
    p.add_argument("--padding-size", type=int, default=1)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--feature-channels", type=int, default=64)


def _add_data_flags(p: argparse.ArgumentParser, splits=("train", "test")) -> None:
    p.add_argument("--dataset", choices=DATASET_CHOICES, default="simb")
    p.add_argument("--data-dir", default=None, help=f"dataset root holding <name>/<split>/; falls back to ${DATA_ENV}")
    for split in splits:
        p.add_argument(f"--{split}-data", default=None, help=f"explicit {split} split directory")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="padprobe", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"padprobe {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="JSON or key = value file; flags override its values")
        p.set_defaults(func=func)
        return p

    g = command("generate", cmd_generate, "simulate and render a dataset split to disk")
    g.add_argument("--dataset", choices=DATASET_CHOICES, default="simb")
    g.add_argument("--split", default="train")
    g.add_argument("--videos", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--overwrite", action="store_true", default=False)

    t = command("train", cmd_train, "train one model configuration")
    _add_data_flags(t, ("train",))
    _add_model_flags(t)
    t.add_argument("--tier", choices=TIER_CHOICES, default="smoke")
    t.add_argument("--iterations", type=int, default=None, help="override the tier's iteration count")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--learning-rate", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", required=True)

    e = command("eval", cmd_eval, "P1/P2 of a checkpoint on a test split")
    _add_data_flags(e, ("test",))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None)

    p = command("probe", cmd_probe, "position-information probes")
    p.add_argument("probe", nargs="?", default=None, choices=["uniformity-matrix", "oracle", "figures"])
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--upscale", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(feature_channels=16)

    r = command("grid", cmd_grid, "train and evaluate every cell of a grid spec")
    r.add_argument("--spec", required=True)
    r.add_argument("--trials", type=int, default=3)
    r.add_argument("--tier", choices=TIER_CHOICES, default="smoke")
    r.add_argument("--iterations", type=int, default=None, help="override the tier's iteration count")
    r.add_argument("--feature-channels", type=int, default=64)
    r.add_argument("--train-videos", type=int, default=200)
    r.add_argument("--test-videos", type=int, default=50)
    r.add_argument("--data-seed", type=int, default=0)
    r.add_argument("--data-dir", default=None, help=f"cache datasets here; falls back to ${DATA_ENV}, else in memory")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--save-checkpoints", action="store_true", default=False)
    r.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    r.add_argument("--out", required=True)
    for p in [parser, *sub.choices.values()]:
        for action in p._actions:  # noqa: SLF001
            # argparse skips the formatter for options whose help is empty
            if action.option_strings and not action.help and action.default is not argparse.SUPPRESS:
                action.help = "(default: %(default)s)"
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    return parser._subparsers._group_actions[0].choices[name]  # noqa: SLF001


def _defer_required(parser: argparse.ArgumentParser) -> None:
    # required flags may come from a config file, so they are checked after merging
    for sub in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
        for action in sub._actions:  # noqa: SLF001
            if action.required and action.option_strings:
                action.required = False
                action.deferred_required = True
                if action.help == "(default: %(default)s)":
                    action.help = "required"


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    _defer_required(parser)
    args = parser.parse_args(argv)
    subparser = _subparser(parser, args.command)
    if args.config:
        values = read_config(args.config)
        values.pop("command", None)
        top = {a.dest for a in parser._actions} - {"help", "version", "command"}  # noqa: SLF001
        known = {a.dest for a in subparser._actions} - {"help"}  # noqa: SLF001
        unknown = sorted(set(values) - known - top)
        if unknown:
            raise CLIError("config", f"unknown keys in {args.config}: {', '.join(unknown)}")
        # config values become defaults, so explicit flags still win
        parser.set_defaults(**{k: v for k, v in values.items() if k in top})
        subparser.set_defaults(**{k: v for k, v in values.items() if k in known})
        args = parser.parse_args(argv)
    missing = [a.option_strings[0] for a in subparser._actions  # noqa: SLF001
               if getattr(a, "deferred_required", False) and getattr(args, a.dest) is None]
    if missing:
        raise CLIError("usage", f"{args.command}: the following arguments are required: {', '.join(missing)}")
    if args.command == "probe" and args.probe is None:
        raise CLIError("usage", "probe: choose one of uniformity-matrix, oracle, figures")
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = argv[0] if argv and not argv[0].startswith("-") else None
    try:
        args = parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except CLIError as exc:
        kind, message = exc.kind, str(exc)
    except (ValueError, OSError) as exc:
        kind, message = type(exc).__name__, str(exc)
    except KeyboardInterrupt:
        kind, message = "interrupted", "interrupted"
    print("padprobe-error " + json.dumps({"command": command, "kind": kind, "message": message}), file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
