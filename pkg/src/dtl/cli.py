"""``dtl`` command line: simulate, embed, train-teacher, train, eval, ablate, gradcheck, dump.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error,
4 training divergence, 5 missing dependency artifact (teacher, dataset,
checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import diffnum as dn
from . import networks as nw
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError
from .datasets import SimConfig, read_split, write_dataset, write_pgm
from .event_io import EventFormatError
from .gradsuite import TOLERANCE, run_suite
from .losses import DivergenceError
from .train import (
    ArrayDataset,
    MissingTeacher,
    TrainConfig,
    ablation_csv,
    arrays_from_samples,
    build_split,
    eel_params,
    evaluate,
    run_ablation,
    train_dtl,
    train_teacher,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISSING = range(6)
MANIFEST = "manifest.json"

log = logging.getLogger("dtl")


class MissingArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = value
    return values


def resolve_config(cls, args, seed_key: str = "seed"):
    """Defaults <- config file <- --set pairs <- --seed."""
    values: dict = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise MissingArtifact(f"cannot read config file {args.config}: {exc}") from None
        values.update(cfgmod.parse_pairs(text))
    values.update(_overrides(args))
    if args.seed is not None:
        values[seed_key] = args.seed
    return cfgmod.apply_overrides(cls(), values)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config, seed, inputs: dict, outputs: list, started: float, **extra) -> None:
    manifest = {
        "command": command,
        "config": asdict(config) if config is not None else {},
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p) for p in outputs),
        "seed": seed,
        "version": __version__,
        # the two fields below vary between otherwise identical runs
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "wall_clock": round(time.time() - started, 3),
    }
    manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _table(metrics: dict, extra: dict | None = None) -> str:
    rows = dict(extra or {})
    rows.update(metrics)
    width = max(len(k) for k in rows) if rows else 0
    lines = []
    for key, value in rows.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        lines.append(f"{key:<{width}}  {value}")
    return "\n".join(lines) + "\n"


def load_data(config: TrainConfig, data_dir) -> tuple[ArrayDataset, ArrayDataset]:
    """Train/test arrays from a simulated dataset directory, or rendered in memory."""
    if data_dir is None:
        return build_split(config, "train"), build_split(config, "test")
    if not Path(data_dir).is_dir():
        raise MissingArtifact(f"dataset directory {data_dir} does not exist")
    try:
        train = read_split(data_dir, "train", config.window)
        test = read_split(data_dir, "test", config.window)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None
    if config.train_stride > 1:
        train = train[:: config.train_stride]
    return (
        arrays_from_samples(train, config.representation, config.bins),
        arrays_from_samples(test, config.representation, config.bins),
    )


def load_test(config: TrainConfig, data_dir) -> ArrayDataset:
    if data_dir is None:
        return build_split(config, "test")
    if not Path(data_dir).is_dir():
        raise MissingArtifact(f"dataset directory {data_dir} does not exist")
    try:
        samples = read_split(data_dir, "test", config.window)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None
    return arrays_from_samples(samples, config.representation, config.bins)


def load_teacher(path, config: TrainConfig):
    if path is None:
        return None
    if not Path(path).is_file():
        raise MissingArtifact(f"teacher checkpoint {path} does not exist")
    return load_checkpoint(path, nw.eel_manifest(1, config.out_channels), requires_grad=False)


def _report_dict(report, config: TrainConfig) -> dict:
    return {
        "task": report.task,
        "arm": report.arm,
        "seed": report.seed,
        "lambdas": list(config.lambdas),
        "arm_lambdas": list(config.arm_lambdas),
        "metrics": report.metrics,
        "history": report.history,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    config = resolve_config(SimConfig, args)
    out = _out_dir(args)
    record = write_dataset(out, config)
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST]
    write_manifest(out, "simulate", config, config.seed, {"config": args.config}, outputs, started,
                   clips=record, label_frame="window end")
    print(f"wrote {sum(len(v) for v in record.values())} clips to {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    if args.data is None:
        raise MissingArtifact("embed needs --data (a directory written by `dtl simulate`)")
    train, test = load_data(config, args.data)
    out = _out_dir(args)
    outputs = []
    for split, data in (("train", train), ("test", test)):
        path = out / f"{split}_{config.representation}.npy"
        np.save(path, data.inputs)
        outputs.append(path)
    write_manifest(out, "embed", config, config.seed, {"data": args.data}, outputs, started)
    print(f"embedded {len(train)} train / {len(test)} test windows as {config.representation}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    train, test = load_data(config, args.data)
    teacher, report = train_teacher(config, train, test)
    out = _out_dir(args)
    ckpt = out / "teacher.ckpt"
    save_checkpoint(teacher, ckpt)
    body = _report_dict(report, config)
    outputs = [ckpt, _write_json(out / "report.json", body)]
    (out / "report.txt").write_text(_table(report.metrics, {"role": "teacher", "task": config.task}))
    outputs.append(out / "report.txt")
    write_manifest(out, "train-teacher", config, config.seed, {"data": args.data}, outputs, started, frozen=True)
    print(_table(report.metrics), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    if config.needs_teacher and args.teacher is None:
        raise MissingTeacher(f"arm {config.arm} needs --teacher")
    teacher = load_teacher(args.teacher, config) if config.needs_teacher else None
    train, test = load_data(config, args.data)
    params, report = train_dtl(config, train, test, teacher)
    out = _out_dir(args)
    ckpt = out / "model.ckpt"
    save_checkpoint(params, ckpt)
    outputs = [ckpt, _write_json(out / "report.json", _report_dict(report, config))]
    (out / "report.txt").write_text(
        _table(report.metrics, {"arm": config.arm, "lambdas": ", ".join(f"{v:g}" for v in config.lambdas)})
    )
    outputs.append(out / "report.txt")
    write_manifest(out, "train", config, config.seed, {"data": args.data, "teacher": args.teacher}, outputs, started)
    print(_table(report.metrics, {"arm": config.arm}), end="")
    return EXIT_OK


def _load_eel(path, config: TrainConfig) -> nw.Params:
    if path is None or not Path(path).is_file():
        raise MissingArtifact(f"checkpoint {path} does not exist")
    params = load_checkpoint(path, nw.eel_manifest(config.in_channels, config.out_channels),
                             requires_grad=False, allow_extra=True)
    return params


def cmd_eval(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    params = eel_params(_load_eel(args.checkpoint, config))
    test = load_test(config, args.data)
    metrics = evaluate(params, test, config)
    out = _out_dir(args)
    outputs = [_write_json(out / "eval.json", {"task": config.task, "metrics": metrics})]
    (out / "eval.txt").write_text(_table(metrics))
    outputs.append(out / "eval.txt")
    write_manifest(out, "eval", config, config.seed, {"checkpoint": args.checkpoint, "data": args.data}, outputs, started)
    print(_table(metrics), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    if args.teacher is None:
        raise MissingTeacher("ablate needs --teacher")
    teacher = load_teacher(args.teacher, config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}", "seeds") from None
    if len(seeds) < 3:
        raise ConfigError("an ablation needs at least 3 seeds", "seeds")
    train, test = load_data(config, args.data)
    rows, means, _ = run_ablation(config, seeds, train, test, teacher)
    out = _out_dir(args)
    table = out / "ablation.csv"
    table.write_text(ablation_csv(rows))
    outputs = [table, _write_json(out / "means.json", means)]
    write_manifest(out, "ablate", config, seeds, {"data": args.data, "teacher": args.teacher}, outputs, started)
    for arm, value in means.items():
        print(f"{arm:<10} {value:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    seed = 0 if args.seed is None else args.seed
    results = run_suite(seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed (> {TOLERANCE:g}): {', '.join(failed)}")
    else:
        print(f"all {len(results)} items within {TOLERANCE:g}")
    if args.out:
        out = _out_dir(args)
        path = _write_json(out / "gradcheck.json", {r.name: r.error for r in results})
        write_manifest(out, "gradcheck", None, seed, {}, [path], started)
    return EXIT_CHECK if failed else EXIT_OK


def _scaled(image: np.ndarray) -> tuple[np.ndarray, dict]:
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo
    scaled = np.zeros(image.shape) if span == 0 else (image - lo) / span
    return np.round(scaled * 255).astype(np.uint8), {"min": lo, "max": hi, "levels": 255}


def cmd_dump(args) -> int:
    started = time.time()
    config = resolve_config(TrainConfig, args)
    if args.checkpoint is None or not Path(args.checkpoint).is_file():
        raise MissingArtifact(f"checkpoint {args.checkpoint} does not exist")
    params = load_checkpoint(args.checkpoint, nw.model_manifest(config.in_channels, config.out_channels),
                             requires_grad=False)
    test = load_test(config, args.data)
    if not 0 <= args.sample < len(test):
        raise ConfigError(f"sample index {args.sample} outside [0, {len(test)})", "sample")
    x = dn.Tensor(test.inputs[args.sample:args.sample + 1])
    eel = nw.eel_forward(params, x, config.task)
    eit = nw.eit_decoder_forward(params, eel.penultimate)
    if config.task == "depth":
        prediction = eel.depth.data[0, 0]
    else:
        prediction = eel.logits.data[0].argmax(axis=0).astype(np.float64)
    images = {
        "eel_features.pgm": eel.penultimate.data[0].mean(axis=0),
        "eit_features.pgm": eit.penultimate.data[0].mean(axis=0),
        "eit_image.pgm": eit.image.data[0, 0],
        "prediction.pgm": prediction,
    }
    out = _out_dir(args)
    scales, outputs = {}, []
    for name, image in images.items():
        pixels, scales[name] = _scaled(image)
        write_pgm(out / name, pixels)
        outputs.append(out / name)
    write_manifest(out, "dump", config, config.seed, {"checkpoint": args.checkpoint, "data": args.data},
                   outputs, started, sample=args.sample, scales=scales)
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="root seed for every random stream")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func)
        return p

    command("simulate", cmd_simulate, "render scenes and simulate their event streams")
    p = command("embed", cmd_embed, "convert event windows to dense tensors")
    p.add_argument("--data")
    p = command("train-teacher", cmd_train_teacher, "train the frame-based teacher")
    p.add_argument("--data")
    p = command("train", cmd_train, "train one ablation arm")
    p.add_argument("--data")
    p.add_argument("--teacher")
    p = command("eval", cmd_eval, "evaluate a checkpoint on the test split")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p = command("ablate", cmd_ablate, "train every arm for several seeds")
    p.add_argument("--data")
    p.add_argument("--teacher")
    p.add_argument("--seeds", default="0,1,2,3,4")
    command("gradcheck", cmd_gradcheck, "run the randomized gradient suite", out_required=False)
    p = command("dump", cmd_dump, "write feature maps, translated image and prediction")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingTeacher, MissingArtifact) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, EventFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
