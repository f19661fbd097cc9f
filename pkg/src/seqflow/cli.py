"""Command-line operator surface.

Subcommands:
    generate  — render a dataset preset to sequence files plus a manifest
    train     — train per a JSON run configuration, saving checkpoints
    eval      — evaluate a checkpoint and emit JSON + CSV reports

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
SPCM_THREADS overrides --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (SceneSpec, generate_scene, make_split, random_scene_spec,
                   spec_hash, write_manifest, write_sequence, SequenceIOError)
from .net import init_model_params
from .training import (ConfigError, DataError, NumericError, RunConfig,
                       checkpoint_hash, evaluate, load_params_into,
                       load_split, report_csv, save_checkpoint, train)

# Dataset presets: sequence count, split counts, and scene parameters.
# Toy scenes keep few small fast-moving objects so that frame-to-frame
# correspondence is recoverable from 256 samples; see data.random_scene_spec.
PRESETS = {
    "toy": dict(count=12, counts=(8, 2, 2), points_per_frame=256,
                n_frames=10, n_input=5, max_objects=2,
                extent_range=(0.08, 0.2), speed_range=(0.7, 1.0)),
    "smoke": dict(count=6, counts=(4, 1, 1), points_per_frame=64,
                  n_frames=5, n_input=3, max_objects=2,
                  extent_range=(0.08, 0.2), speed_range=(0.7, 1.0)),
}


def preset_specs(name: str, seed: int) -> list[SceneSpec]:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    p = {k: v for k, v in PRESETS[name].items() if k not in ("count", "counts")}
    return [random_scene_spec(seed=seed * 10_000 + i, **p)
            for i in range(PRESETS[name]["count"])]


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = preset_specs(args.preset, args.seed)
    paths, hashes = [], []
    for i, spec in enumerate(specs):
        seq = generate_scene(spec)
        name = f"seq_{i:04d}.spcm"
        write_sequence(seq, out / name)
        paths.append(name)
        hashes.append(spec_hash(spec))
    counts = PRESETS[args.preset]["counts"]
    rows = make_split(paths, hashes, counts, seed=args.seed)
    write_manifest(rows, out / "manifest.jsonl")
    print(f"wrote {len(paths)} sequences and manifest.jsonl to {out}")
    return 0


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    threads = os.environ.get("SPCM_THREADS")
    if threads is not None:
        try:
            overrides["threads"] = int(threads)
        except ValueError as exc:
            raise ConfigError(f"SPCM_THREADS must be an int: {threads!r}") from exc
    elif args.threads is not None:
        overrides["threads"] = args.threads
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    return replace(config, **overrides) if overrides else config


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.checkpoint is not None:
        config = replace(config, init_checkpoint=str(args.checkpoint))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, on_epoch=lambda row: print(
        f"epoch {row['epoch']}: train_loss={row['train_loss']} "
        f"val={row.get('val_metric')}"))
    save_checkpoint(out / "checkpoint_final.spcmckp", result.params,
                    config.arch, meta={"config_hash": config.config_hash(),
                                       "seed": config.seed})
    save_checkpoint(out / "checkpoint_best.spcmckp", result.best_params,
                    config.arch, meta={"config_hash": config.config_hash(),
                                       "seed": config.seed})
    with open(out / "loss_curve.jsonl", "w") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"trained {result.steps} steps; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    params = init_model_params(config.arch, config.seed)
    ref = ""
    if args.checkpoint:
        load_params_into(params, args.checkpoint, config.arch)
        ref = checkpoint_hash(args.checkpoint)
    seqs = load_split(config.manifest, args.split)
    report = evaluate(config, params, seqs=seqs, checkpoint_ref=ref)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out / "report.csv").write_text(report_csv(report))
    print(f"aggregate: {report['aggregate']}")
    print(f"report written to {report_path}")
    return 0


def _bool_flag(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqflow",
        description="sequential scene flow estimation and forecasting toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a dataset preset")
    gen.add_argument("--preset", default="toy")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_generate)

    for name, fn in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} per a JSON run config")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", type=_bool_flag, default=None)
        if name == "eval":
            p.add_argument("--split", default="test")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, SequenceIOError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
