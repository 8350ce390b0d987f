"""Command-line entry point: ``faultfit {train,evaluate,sweep,quantize-demo}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .data import TEST_IMAGES, TRAIN_IMAGES, find_images, load_idx
from .experiments import (
    ExperimentConfig,
    evaluate_checkpoint,
    run_experiment,
    summarize,
    write_plots,
    write_results_csv,
    write_summary_csv,
)
from .fixedpoint import QFormat, flip_bit, perturb_float, quantize

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_VERSION = 1

log = logging.getLogger("faultfit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    """Read a YAML config (or a run manifest) and apply ``key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a key/value mapping")
        if "manifest_version" in raw:
            raw = raw["config"]
    known = set(ExperimentConfig.model_fields)
    for key in raw:
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        try:
            raw[key] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse value for {key!r}: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}" for e in exc.errors()
        )
        raise UsageError(f"invalid config: {problems}") from exc


def _resolve_data(cfg: ExperimentConfig, data_dir) -> ExperimentConfig:
    train = cfg.train_images or str(find_images(TRAIN_IMAGES, data_dir).resolve())
    test = cfg.test_images or str(find_images(TEST_IMAGES, data_dir).resolve())
    return cfg.model_copy(update={"train_images": train, "test_images": test})


def write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig) -> Path:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "artifact": {"name": "faultfit", "version": __version__},
        "command": command,
        "numpy": np.__version__,
        "seeds": cfg.seeds,
        "config": cfg.model_dump(mode="json"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file or a manifest.json from an earlier run")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (YAML value syntax, e.g. seeds=[1,2])")
    p.add_argument("--data-dir", help="directory holding the MNIST IDX files "
                                      "(default: $FAULTFIT_DATA_DIR or data/mnist)")
    p.add_argument("--train-images", help="train IDX image file")
    p.add_argument("--test-images", help="test IDX image file")
    p.add_argument("--limit-train", type=int, help="use only the first N training images")
    p.add_argument("--limit-test", type=int, help="use only the first N test images")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faultfit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"faultfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train every configured network and save checkpoints")
    _add_config_args(p)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("evaluate", help="evaluate saved checkpoints at the configured fault rates")
    _add_config_args(p)
    p.add_argument("--checkpoint", action="append", required=True, help="repeatable")
    p.add_argument("--trace", action="store_true", help="write a CSV log of injected faults")

    p = sub.add_parser("sweep", help="train and evaluate the full grid, writing result CSVs")
    _add_config_args(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace", action="store_true", help="write a CSV log of injected faults")
    p.add_argument("--plots", action="store_true", help="also write SVG plots")

    p = sub.add_parser("quantize-demo", help="show a single bit-flip on a fixed-point value")
    p.add_argument("--format", default="Q16.12")
    p.add_argument("--value", type=float, required=True)
    p.add_argument("--bit", type=int, required=True)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    for flag, key in (("train_images", "train_images"), ("test_images", "test_images"),
                      ("limit_train", "limit_train"), ("limit_test", "limit_test")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return load_config(args.config, overrides)


def _cmd_quantize_demo(args) -> int:
    try:
        fmt = QFormat.parse(args.format)
        before = quantize(args.value, fmt)
        after = flip_bit(before, args.bit)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    log.info("%s raw %d -> %d", fmt, before.raw, after.raw)
    print(perturb_float(args.value, fmt, args.bit))
    return EXIT_OK


def _cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    write_manifest(out, "train", cfg)
    run_experiment(cfg, out_dir=out, jobs=args.jobs, evaluate=False)
    return EXIT_OK


def _cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    write_manifest(out, "evaluate", cfg)
    X_test = load_idx(cfg.test_images).limit(cfg.limit_test).images
    results = []
    for ckpt in args.checkpoint:
        results.extend(evaluate_checkpoint(ckpt, cfg, X_test, out if args.trace else None))
    write_results_csv(out / "results.csv", results)
    write_summary_csv(out / "summary.csv", summarize(results))
    return EXIT_OK


def _cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> int:
    write_manifest(out, "sweep", cfg)
    results = run_experiment(cfg, out_dir=out, jobs=args.jobs, trace=args.trace)
    write_results_csv(out / "results.csv", results)
    rows = summarize(results)
    write_summary_csv(out / "summary.csv", rows)
    if args.plots:
        write_plots(rows, out)
    for r in rows:
        print(f"{r.regime:8s} features={r.features:<4d} epochs={r.epochs:<4d} "
              f"rate={r.fault_rate:<8.2g} loss={r.mean:.6f} +- {r.stderr:.6f} (n={r.n_seeds})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "quantize-demo":
            return _cmd_quantize_demo(args)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = _config_from_args(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command in ("train", "sweep"):
            cfg = _resolve_data(cfg, args.data_dir)
        elif cfg.test_images is None:
            cfg = cfg.model_copy(update={
                "test_images": str(find_images(TEST_IMAGES, args.data_dir).resolve())})
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = {"train": _cmd_train, "evaluate": _cmd_evaluate, "sweep": _cmd_sweep}
        return handler[args.command](args, cfg, out)
    except Exception as exc:  # reported, not re-raised: the exit code carries the failure
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
