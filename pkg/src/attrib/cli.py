"""``attrib`` command line: explain, evaluate, selftest, train-toy.

Exit codes: 0 success, 1 invariant failure, 2 I/O or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evaluation.datasets import default_config, gen_synthetic_dataset, text_vocab
from .evaluation.report import BASELINES, evaluate, report_csv, thread_count
from .evaluation.training import TrainingDiverged, accuracy, train_toy
from .explainers import METHODS, explain
from .io import (InputFileError, dump_json, heatmap_record, pgm_bytes, read_pgm, read_text,
                 read_vocab)
from .model import ConfigError, ModelFileError, forward_record, load_model, save_model
from .selftest import FAULTS, run_selftest

DEFAULT_SEED = 0
EXIT_OK, EXIT_INVARIANT, EXIT_IO = 0, 1, 2

log = logging.getLogger("attrib")


class UsageError(Exception):
    """Bad paths or arguments detected before any computation."""


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _formats(args, default: tuple[str, ...], allowed: tuple[str, ...]) -> tuple[str, ...]:
    fmts = tuple(args.format) if args.format else default
    bad = [f for f in fmts if f not in allowed]
    if bad:
        raise UsageError(f"--format {bad[0]} not supported by {args.command} ({', '.join(allowed)})")
    return fmts


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return out


def cmd_explain(args) -> int:
    model_path = _require_file(args.model, "model")
    input_path = _require_file(args.input, "input")
    if args.vocab:
        _require_file(args.vocab, "vocab")
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}")
    fmts = _formats(args, ("pgm", "json"), ("pgm", "json"))
    out = _out_dir(args.out)

    model = load_model(model_path)
    cfg = model.config
    if cfg.modality == "image":
        raw = read_pgm(input_path)
    else:
        vocab = read_vocab(args.vocab) if args.vocab else text_vocab()
        raw = read_text(input_path, vocab, cfg.text_len)
    t = args.target_class
    if t is None:
        t = int(np.argmax(forward_record(model, raw).output_logits))
    elif not 0 <= t < cfg.classes:
        raise UsageError(f"--class {t} out of range for {cfg.classes} classes")
    rmap = explain(model, raw, args.method, t)

    values = rmap.pixel_map if rmap.pixel_map is not None else rmap.token_scores[None, :]
    grid = rmap.grid if rmap.grid is not None else (1, cfg.text_len)
    data, lo, hi = pgm_bytes(values)
    stem = f"{input_path.stem}.{args.method}.{t}"
    if "pgm" in fmts:
        (out / f"{stem}.pgm").write_bytes(data)
    if "json" in fmts:
        record = heatmap_record(args.method, t, rmap.token_scores, grid, lo, hi)
        record.update(seed=args.seed, config=cfg.to_dict())
        dump_json(record, out / f"{stem}.json")
    print(f"wrote {out / stem}.{{{','.join(fmts)}}}")
    return EXIT_OK


def _methods(args) -> list[str]:
    methods = []
    for chunk in args.method_list or ["ours,rollout,random"]:
        methods.extend(m for m in chunk.split(",") if m)
    for m in methods:
        if m not in METHODS and m not in BASELINES:
            raise UsageError(f"unknown method {m!r}")
    return methods


def cmd_evaluate(args) -> int:
    model_path = _require_file(args.model, "model")
    methods = _methods(args)
    fmts = _formats(args, ("json", "csv"), ("json", "csv"))
    if args.items < 1:
        raise UsageError("--items must be >= 1")
    thread_count()
    out = _out_dir(args.out)

    model = load_model(model_path)
    cfg = model.config
    if cfg.modality == "image":
        ds = gen_synthetic_dataset("image", args.items, args.dataset_seed,
                                   image_size=tuple(cfg.image_size), patch_size=cfg.patch_size,
                                   classes=cfg.classes)
    else:
        ds = gen_synthetic_dataset("text", args.items, args.dataset_seed, text_len=cfg.text_len)
    report = evaluate(model, ds, methods, args.seed,
                      provenance={"model": model_path.name, "accuracy": accuracy(model, ds)})
    if "json" in fmts:
        dump_json(report, out / "report.json")
    if "csv" in fmts:
        (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    print(f"evaluated {', '.join(methods)} on {len(ds)} {cfg.modality} items -> {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} invariants hold")
    return EXIT_OK if failed == 0 else EXIT_INVARIANT


def cmd_train_toy(args) -> int:
    if args.items < 1 or args.epochs < 0 or args.lr < 0:
        raise UsageError("--items must be >= 1, --epochs and --lr non-negative")
    out = _out_dir(args.out)
    cfg = default_config(args.modality)
    neutral = args.items // 2 if args.modality == "image" else 0
    ds = gen_synthetic_dataset(args.modality, args.items, args.dataset_seed, neutral_items=neutral)
    try:
        result = train_toy(cfg, ds, args.epochs, args.lr, args.seed)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    save_model(result.model, out / "model.json")
    dump_json({"modality": args.modality, "seed": args.seed, "dataset_seed": args.dataset_seed,
               "items": args.items, "neutral_items": neutral, "epochs": args.epochs,
               "lr": args.lr, "config": cfg.to_dict(), "losses": result.losses,
               "accuracies": result.accuracies,
               "train_accuracy": result.train_accuracy}, out / "train.json")
    print(f"trained {args.modality} model: accuracy {result.train_accuracy:.3f} -> {out / 'model.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrib", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="."):
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--format", action="append", choices=("pgm", "json", "csv"),
                        help="output format (repeatable)")

    e = sub.add_parser("explain", help="write a relevance heatmap for one input")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True, help="PGM image or whitespace-tokenised text")
    e.add_argument("--method", default="ours", help=f"one of {', '.join(METHODS)}")
    e.add_argument("--class", dest="target_class", type=int, default=None,
                   help="target class (default: predicted)")
    e.add_argument("--vocab", default=None, help="vocabulary JSON for text models")
    common(e)

    v = sub.add_parser("evaluate", help="run the evaluation protocols on a synthetic dataset")
    v.add_argument("--model", required=True)
    v.add_argument("--method", dest="method_list", action="append",
                   help="comma-separated methods (repeatable); 'random' is a baseline")
    v.add_argument("--dataset-seed", type=int, default=DEFAULT_SEED)
    v.add_argument("--items", type=int, default=50)
    common(v)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)

    t = sub.add_parser("train-toy", help="train a model on the synthetic task")
    t.add_argument("--modality", choices=("image", "text"), default="image")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=0.03)
    t.add_argument("--items", type=int, default=60)
    t.add_argument("--dataset-seed", type=int, default=DEFAULT_SEED)
    common(t)
    return p


COMMANDS = {"explain": cmd_explain, "evaluate": cmd_evaluate, "selftest": cmd_selftest,
            "train-toy": cmd_train_toy}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InputFileError, ModelFileError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
