"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 numeric fault, 4 i/o error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .autodiff import NumericFault
from .config import ConfigError, ModelConfig, preset
from .experiments import ABLATION_ROWS, copy_input_baseline, evaluate_checkpoint, run_ablation
from .metrics import render_table
from .phantom import SampleFormatError, generate_phantom, load_split, read_sample, write_pgm, write_planes, write_sample
from .training import CheckpointError, MetricsLog, TrainingFault, pretrain_tokenizers, read_checkpoint, synthesize, train_autoregression

log = logging.getLogger("cavm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
RUN_KEYS = ("data", "output")


class UsageError(Exception):
    pass


# -- config files --------------------------------------------------------------------

def load_run_config(path: str | None) -> tuple[ModelConfig, dict]:
    """JSON file: ModelConfig fields (optionally ``preset``) plus ``data`` / ``output`` paths."""
    if path is None:
        return preset("toy"), {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: config parse error: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    run = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    try:
        cfg = ModelConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return cfg, run


def _require_dir(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} is not a directory")
    return p


def _require_writable_parent(path: str | Path) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write to {p}: parent directory missing or not writable")
    return p


def _apply_steps(cfg: ModelConfig, args) -> ModelConfig:
    if getattr(args, "steps", None) is not None:
        cfg = dataclasses.replace(cfg, pretrain_steps=args.steps, ar_steps=args.steps)
    return cfg


def _provenance(cfg: ModelConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(out)
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable ({exc})") from None
    seed = args.seed
    manifest = {"size": args.size, "first_seed": args.seed, "splits": {}}
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        (out / split).mkdir(exist_ok=True)
        seeds = list(range(seed, seed + count))
        for s in seeds:
            write_sample(generate_phantom(s, args.size), out / split / f"{s}.cavm")
        manifest["splits"][split] = {"count": count, "seeds": seeds}
        seed += count
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d samples to %s", seed - args.seed, out)
    return EXIT_OK


def cmd_train_tokenizer(args) -> int:
    cfg, run = load_run_config(args.config)
    cfg = _apply_steps(cfg, args)
    data = _require_dir(args.data or run.get("data") or "", "data directory")
    out = _require_writable_parent(args.out)
    train = load_split(data, "train")
    if len(train) < 2:
        raise UsageError(f"{data}/train holds {len(train)} samples; need at least 2")
    metrics = MetricsLog(args.log or str(out) + ".metrics.jsonl")
    pretrain_tokenizers(train, cfg, checkpoint_path=out, metrics=metrics)
    log.info("tokenizer checkpoint written to %s", out)
    return EXIT_OK


def cmd_train_ar(args) -> int:
    if not args.init:
        raise UsageError("train-ar requires --init CKPT (a phase-1 tokenizer checkpoint)")
    cfg, run = load_run_config(args.config)
    cfg = _apply_steps(cfg, args)
    data = _require_dir(args.data or run.get("data") or "", "data directory")
    out = _require_writable_parent(args.out)
    pretrained = read_checkpoint(args.init)
    train = load_split(data, "train")
    metrics = MetricsLog(args.log or str(out) + ".metrics.jsonl")
    train_autoregression(train, pretrained, cfg, checkpoint_path=out, metrics=metrics)
    log.info("autoregression checkpoint written to %s", out)
    return EXIT_OK


DOSE_NAMES = {1: ("y_sd",), 2: ("y_ld", "y_sd"), 3: ("y_ld", "y_hd", "y_sd")}


def cmd_synthesize(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    sample = read_sample(args.input)
    if ckpt.codec is None:
        raise UsageError(f"{args.ckpt} holds no tokenizer/decoder weights")
    if sample.size != ckpt.cfg.codec.image_size:
        raise UsageError(f"input size {sample.size} does not match checkpoint image size {ckpt.cfg.codec.image_size}")
    if args.steps is not None and ckpt.ar is not None:
        ckpt.cfg = dataclasses.replace(ckpt.cfg, num_steps=args.steps).validate()
        ckpt.ar.cfg = ckpt.cfg
    images = synthesize(sample.x, ckpt)
    names = DOSE_NAMES[len(images)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vmax = float(sample.y_sd.max())
    for i, (name, image) in enumerate(zip(names, images)):
        write_planes(out / f"{i:02d}_{name}.cavm", {name: image}, sample.seed, _provenance(ckpt.cfg))
        if args.preview:
            write_pgm(out / f"{i:02d}_{name}.pgm", image, vmax)
    log.info("wrote %d images to %s", len(images), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    data = _require_dir(args.data, "data directory")
    out = _require_writable_parent(args.out)
    samples = load_split(data, args.split)
    if not samples:
        raise UsageError(f"{data}/{args.split} holds no samples")
    reports = {"copy input (T1w)": copy_input_baseline(samples), "CAVM" if ckpt.ar else "decoder only": evaluate_checkpoint(samples, ckpt)}
    _write_report(out, reports, ckpt.cfg)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, run = load_run_config(args.config)
    data = _require_dir(args.data or run.get("data") or "", "data directory")
    out = _require_writable_parent(args.out)
    train, test = load_split(data, "train"), load_split(data, args.split)
    if len(train) < 2 or not test:
        raise UsageError(f"{data} needs >= 2 train samples and a non-empty {args.split} split")
    reports = run_ablation(train, test, cfg, args.pretrain_steps, args.ar_steps, metrics=MetricsLog(str(out) + ".metrics.jsonl"))
    _write_report(out, {row: reports[row] for row in ABLATION_ROWS}, cfg)
    return EXIT_OK


def _write_report(out: Path, reports: dict, cfg: ModelConfig) -> None:
    prov = _provenance(cfg)
    table = render_table(reports)
    out.write_text(f"# config_hash={prov['config_hash']} seed={prov['seed']}\n{table}\n")
    with open(str(out) + ".jsonl", "w") as fh:
        for method, report in reports.items():
            fh.write(report.to_json(method, **prov) + "\n")
    print(table)


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavm", description="Dose-increase autoregressive synthesis on phantom data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/val/test phantom splits")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=20)
    g.add_argument("--test", type=int, default=40)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    for name, func, needs_init in (("train-tokenizer", cmd_train_tokenizer, False), ("train-ar", cmd_train_ar, True)):
        t = sub.add_parser(name, help="phase-1 pretraining" if not needs_init else "phase-2 autoregression training")
        t.add_argument("--config")
        t.add_argument("--data")
        t.add_argument("--out", required=True)
        t.add_argument("--steps", type=int, help="override the number of optimisation steps")
        t.add_argument("--log", help="metrics log path (default: <out>.metrics.jsonl)")
        if needs_init:
            t.add_argument("--init", help="phase-1 checkpoint")
        t.set_defaults(func=func)

    s = sub.add_parser("synthesize", help="run dose-increase inference on one sample")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, choices=(1, 2, 3))
    s.add_argument("--preview", action="store_true", help="also write 8-bit PGM previews")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="region-split SSIM/PSNR on a data split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate the four ablation variants")
    a.add_argument("--data")
    a.add_argument("--config", "--configs", dest="config")
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--pretrain-steps", type=int)
    a.add_argument("--ar-steps", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cavm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ConfigError) as exc:
        print(f"cavm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingFault as exc:
        print(f"cavm: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericFault as exc:
        print(f"cavm: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SampleFormatError) as exc:
        print(f"cavm: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
