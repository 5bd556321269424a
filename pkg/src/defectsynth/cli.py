"""Command line driver: make-toy-data, train, generate, eval-fid, train-inspector.

Exit codes: 0 success, 1 invalid invocation or config, 2 failure while running.
Every run writes ``run_manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .controlmap import ControlMapError, ControlRegionSpec, paint_regions, parse
from .datamodel import DatasetError, ToyDefectSpec, load_images, load_manifest, make_toy_dataset
from .trainer import ConfigError, desk_config, latest_checkpoint, paper_config, read_checkpoint_manifest

log = logging.getLogger("defectsynth")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class InvocationError(ValueError):
    pass


# -- config resolution ---------------------------------------------------------


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if isinstance(raw, str):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
    else:
        value = raw
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "yes", "on", "false", "no", "off"):
            return value.lower() in ("true", "yes", "on")
        if value in (0, 1):
            return bool(value)
        raise InvocationError(f"--{key} expects a boolean, got {raw!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise InvocationError(f"--{key} expects an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float) or default is None:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvocationError(f"--{key} expects a number, got {raw!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvocationError(f"--{key} expects a JSON list, got {raw!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return str(value)


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise InvocationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise InvocationError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


def resolve_config(base, file_path: str | None, overrides: dict[str, Any]):
    """Overlay a JSON config file and then CLI overrides onto a dataclass instance."""
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    layers: list[dict] = []
    if file_path:
        path = Path(file_path)
        if not path.is_file():
            raise InvocationError(f"config file {path} not found")
        try:
            layers.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InvocationError(f"config file {path} is not valid JSON: {exc}") from None
    layers.append(overrides)
    values = {}
    for layer in layers:
        for key, raw in layer.items():
            if key not in defaults:
                raise InvocationError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, defaults[key])
    return dataclasses.replace(base, **values)


# -- run manifest ------------------------------------------------------------


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_run_manifest(
    out: Path, command: str, config, seed: int | None, artifacts: dict, results: dict | None = None
) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": _jsonable(config),
        "artifacts": _jsonable(artifacts),
        "results": _jsonable(results or {}),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# -- subcommands ---------------------------------------------------------------
# Each handler validates its inputs (errors there exit 1) and returns a
# closure that does the work (errors there exit 2).


def _cmd_make_toy_data(args, overrides):
    spec = resolve_config(ToyDefectSpec(), args.config, overrides)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    spec.validate()
    out = Path(args.out)

    def execute():
        manifest = make_toy_dataset(spec, out)
        write_run_manifest(
            out, "make-toy-data", spec, spec.seed, {"index": out / "index.csv"}, {"records": len(manifest)}
        )

    return execute


def _cmd_train(args, overrides):
    preset = {"desk": desk_config, "paper": paper_config}[args.preset]()
    config = resolve_config(preset, args.config, overrides)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    config.validate()
    data = Path(args.data)
    if not (data / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {data}")
    if args.resume and not (Path(args.resume) / "manifest.json").is_file():
        raise InvocationError(f"{args.resume} is not a checkpoint")
    out = Path(args.out)

    def execute():
        from .trainer import train

        manifest = load_manifest(data, args.split)
        trainer = train(config, manifest, out, resume=args.resume)
        ckpt = latest_checkpoint(out)
        write_run_manifest(
            out,
            "train",
            config,
            config.seed,
            {"checkpoint": ckpt, "log": out / "train_log.jsonl", "data": data.resolve()},
            {"iterations": trainer.iteration},
        )

    return execute


def _cmd_generate(args, overrides):
    if overrides:
        raise InvocationError(f"unknown config key {next(iter(overrides))!r}")
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        ckpt = latest_checkpoint(ckpt) if ckpt.is_dir() and any(ckpt.glob("ckpt_*")) else ckpt
    ckpt_manifest = read_checkpoint_manifest(ckpt)
    size = ckpt_manifest["config"]["image_size"]
    if args.box and args.control_map:
        raise InvocationError("use either --box or --control-map, not both")
    control = None
    if args.box:
        control = paint_regions(ControlRegionSpec.from_boxes(args.box), size, size)
    elif args.control_map:
        control = parse(args.control_map)
    if args.count < 1:
        raise InvocationError("--count must be >= 1")
    data = Path(args.data)
    if not (data / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {data}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    settings = {
        "checkpoint": str(ckpt.resolve()),
        "data": str(data.resolve()),
        "split": args.split,
        "count": args.count,
        "with_restorations": args.with_restorations,
        "box": args.box,
        "control_map": args.control_map,
        "category": args.category,
    }

    def execute():
        from .evaluation import generate_corpus

        manifest = load_manifest(data, args.split)
        corpus = generate_corpus(
            ckpt,
            manifest,
            args.count,
            out,
            category_sampler=args.category,
            seed=seed,
            with_restorations=args.with_restorations,
            control_map=control,
        )
        write_run_manifest(
            out,
            "generate",
            settings,
            seed,
            {"index": out / "index.csv"},
            {"synthetic": len(corpus.by_source("synthetic")), "restored": len(corpus.by_source("restored"))},
        )

    return execute


def _cmd_eval_fid(args, overrides):
    if overrides:
        raise InvocationError(f"unknown config key {next(iter(overrides))!r}")
    real_root = Path(args.real)
    if not (real_root / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {real_root}")
    if args.fake is None and not args.ideal_split:
        raise InvocationError("give --fake DIR or --ideal-split")
    if args.fake is not None and not (Path(args.fake) / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {args.fake}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)

    def execute():
        from .evaluation import fid, ideal_split_fid, pixel_pca_embedder

        real_manifest = load_manifest(real_root, args.split)
        real_records = real_manifest.defects() if args.defects_only else real_manifest.records
        size = args.size
        real = load_images(real_records, size)
        embed = pixel_pca_embedder(real, args.k)
        if args.ideal_split:
            score = ideal_split_fid(real, embed, seed)
            n_fake = len(real) - len(real) // 2
            n_real = len(real) // 2
        else:
            fake_manifest = load_manifest(args.fake, "train")
            fake_records = fake_manifest.by_source("synthetic") or fake_manifest.records
            fake = load_images(fake_records, size)
            score = fid(real, fake, embed)
            n_real, n_fake = len(real), len(fake)
        report = {
            "embedder": embed.identifier,
            "k": embed.dim,
            "n_real": n_real,
            "n_fake": n_fake,
            "fid": score,
            "seed": seed,
        }
        out.mkdir(parents=True, exist_ok=True)
        (out / "fid.json").write_text(json.dumps(report, indent=2))
        print(json.dumps(report))
        write_run_manifest(out, "eval-fid", vars(args), seed, {"report": out / "fid.json"}, report)

    return execute


def _cmd_train_inspector(args, overrides):
    from .inspector import InspectorConfig, desk_inspector_config

    preset = desk_inspector_config() if args.preset == "desk" else InspectorConfig()
    config = resolve_config(preset, args.config, overrides)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    config.validate()
    data = Path(args.data)
    if not (data / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {data}")
    if args.synthetic is not None and not (Path(args.synthetic) / "index.csv").is_file():
        raise InvocationError(f"no index.csv under {args.synthetic}")
    out = Path(args.out)

    def execute():
        import torch

        from .inspector import evaluate, mix_training_data, train_inspector

        real = load_manifest(data, "train")
        val = load_manifest(data, "val")
        test = load_manifest(data, "test")
        synthetic = load_manifest(args.synthetic, "train") if args.synthetic else None
        mixed = mix_training_data(real, synthetic)
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.jsonl"
        metrics.write_text("")

        def record(entry):
            with open(metrics, "a") as fh:
                fh.write(json.dumps(entry) + "\n")

        result = train_inspector(config, mixed, val if len(val) else None, callback=record)
        torch.save(result.model.state_dict(), out / "best_model.pt")
        results = {
            "best_epoch": result.best_epoch,
            "val_accuracy": result.best_val_accuracy,
            "test_accuracy": evaluate(result.model, test, config.input_size) if len(test) else None,
            "sources": mixed.source_counts(),
        }
        write_run_manifest(
            out,
            "train-inspector",
            config,
            config.seed,
            {"metrics": metrics, "model": out / "best_model.pt", "data": data.resolve(), "synthetic": args.synthetic},
            results,
        )

    return execute


COMMANDS: dict[str, Callable] = {
    "make-toy-data": _cmd_make_toy_data,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval-fid": _cmd_eval_fid,
    "train-inspector": _cmd_train_inspector,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of config keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        return p

    common(sub.add_parser("make-toy-data", help="render the procedural toy defect dataset"))

    p = common(sub.add_parser("train", help="train the defect synthesis GAN"))
    p.add_argument("--data", required=True, help="dataset root with index.csv")
    p.add_argument("--split", default="train")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = common(sub.add_parser("generate", help="synthesize a defect corpus from a checkpoint"))
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or training output directory")
    p.add_argument("--data", required=True, help="dataset root supplying normal samples")
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--with-restorations", action="store_true")
    p.add_argument("--box", action="append", help="category:x0,y0,x1,y1 (repeatable)")
    p.add_argument("--control-map", help="control map archive")
    p.add_argument("--category", help="condition every sample on this category")

    p = common(sub.add_parser("eval-fid", help="Frechet distance between real and generated sets"))
    p.add_argument("--real", required=True)
    p.add_argument("--fake")
    p.add_argument("--split", default="test")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--defects-only", action="store_true")
    p.add_argument("--ideal-split", action="store_true", help="score two random halves of the real set")

    p = common(sub.add_parser("train-inspector", help="train the defect classifier"))
    p.add_argument("--data", required=True)
    p.add_argument("--synthetic", help="generated corpus root to mix in")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        execute = COMMANDS[args.command](args, parse_overrides(extra))
    except (InvocationError, ConfigError, DatasetError, ControlMapError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        execute()
    except Exception as exc:  # noqa: BLE001
        log.exception("%s failed", args.command)
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
