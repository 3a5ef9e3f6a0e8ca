"""Command-line front end: ``simcal-lab <command> [options]``."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import __version__
from . import rng as streams
from .cache import DatasetCache
from .combine import SCHEMES, CombineConfig, batch_combine, save_predictions
from .config import RunConfig, cache_dir, output_root
from .core_types import ConfigError, SimCalError
from .evaluator import compare, evaluate, load_report, save_report
from .experiments import EXPERIMENTS, ExperimentFailed, render_verdicts, run_experiment
from .head import load_head, predict_proba, save_head
from .synth import SynthDataset, generate, generate_eval, load_dataset, save_dataset, summarize
from .trainer import (
    HEAD_INITS,
    LAYER_CHOICES,
    SWEEP_HEAD_INIT,
    SWEEP_KINDS,
    SWEEP_LAYERS,
    SweepBase,
    calibrate,
    props_gt_oracle,
    sweep,
    train_standard,
)

logger = logging.getLogger(__name__)


def _setup_logging(quiet: bool, verbose: bool) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def _banner(command: str, config: RunConfig, out: str) -> None:
    print(f"🚀 SimCal Lab v{__version__}", file=sys.stderr)
    print(f"🧪 Command: {command}  (root seed {config.seed})", file=sys.stderr)
    print(f"📁 Output: {out}", file=sys.stderr)
    print("", file=sys.stderr)


def _cache(args: argparse.Namespace) -> Optional[DatasetCache]:
    if getattr(args, "no_cache", False):
        return None
    try:
        return DatasetCache(cache_dir())
    except OSError as e:
        logger.debug("dataset cache unavailable: %s", e)
        return None


def _datasets(config: RunConfig, cache: Optional[DatasetCache]) -> Tuple[SynthDataset, SynthDataset]:
    synth = config.synth_config()
    per_class = config.eval_instances_per_class()
    if cache is None:
        return generate(synth), generate_eval(synth, per_class)
    train = cache.get_or_create({"split": "train", "synth": synth.to_dict()}, lambda: generate(synth))
    eval_set = cache.get_or_create(
        {"split": "eval", "synth": synth.to_dict(), "instances_per_class": per_class},
        lambda: generate_eval(synth, per_class),
    )
    return train, eval_set


def _train_set(args: argparse.Namespace, config: RunConfig) -> SynthDataset:
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset)
    return _datasets(config, _cache(args))[0]


def _write_json(path: str, obj: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    """Generate the training and evaluation splits and their summary."""
    train, eval_set = _datasets(config, _cache(args))
    hashes = {
        "train.json": save_dataset(train, os.path.join(args.out, "train.json")),
        "eval.json": save_dataset(eval_set, os.path.join(args.out, "eval.json")),
    }
    summary = summarize(train, config.instance_bins(), config.image_sets())
    summary["sha256"] = hashes
    _write_json(os.path.join(args.out, "summary.json"), summary)
    config.write(os.path.join(args.out, "config.ini"))
    print(json.dumps({k: summary[k] for k in ("num_classes", "num_images", "num_instances", "num_proposals", "sha256")}))
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the original head."""
    train = _train_set(args, config)
    head, log = train_standard(
        train, config.head_spec(), config.standard_schedule(), streams.substream(config.seed, streams.TRAIN)
    )
    save_head(head, os.path.join(args.out, "original_head.json"))
    log.save(os.path.join(args.out, "train_log.jsonl"))
    config.write(os.path.join(args.out, "config.ini"))
    print(os.path.join(args.out, "original_head.json"))
    return 0


def cmd_calibrate(args: argparse.Namespace, config: RunConfig) -> int:
    """Calibrate a trained original head under bi-level sampling."""
    train = _train_set(args, config)
    original = load_head(args.head)
    head, log = calibrate(train, original, config.calib_config(), streams.substream(config.seed, streams.CALIBRATE))
    save_head(head, os.path.join(args.out, "calibrated_head.json"))
    log.save(os.path.join(args.out, "calibrate_log.jsonl"))
    config.write(os.path.join(args.out, "config.ini"))
    print(os.path.join(args.out, "calibrated_head.json"))
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    """Evaluate one head, a dual-head combination, or the label oracle."""
    if args.dataset and args.eval_dataset:
        train, eval_set = load_dataset(args.dataset), load_dataset(args.eval_dataset)
    else:
        train, eval_set = _datasets(config, _cache(args))
        if args.dataset:
            train = load_dataset(args.dataset)
        if args.eval_dataset:
            eval_set = load_dataset(args.eval_dataset)
    bins, sets = config.instance_bins(), config.image_sets()
    if args.oracle:
        report = props_gt_oracle(eval_set, train.stats, bins, sets)
    else:
        if not args.head:
            raise ConfigError("eval needs --head (or --oracle)")
        p_first = predict_proba(load_head(args.head), eval_set.features)
        if args.original:
            p_orig = predict_proba(load_head(args.original), eval_set.features)
            cfg = config.combine_config()
            if args.scheme:
                cfg = CombineConfig(args.scheme, cfg.T, cfg.thr, cfg.sel_bg, cfg.det_top_k)
            scores = batch_combine(p_first, p_orig, train.stats, cfg)
            predictor = cfg.scheme
        else:
            scores, predictor = p_first, "single"
        save_predictions(eval_set.proposal_ids, scores, os.path.join(args.out, "predictions.json"))
        report = evaluate(scores, eval_set, bins, train.stats, sets, metadata={"predictor": predictor})
    path = os.path.join(args.out, "report.json")
    save_report(report, path)
    config.write(os.path.join(args.out, "config.ini"))
    print(json.dumps(report.metrics()))
    return 0


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    """Compare two reports: CSV on disk, table on stdout."""
    if len(args.reports) != 2:
        raise ConfigError("compare takes exactly two report files")
    a, b = (load_report(p) for p in args.reports)
    names = tuple(os.path.splitext(os.path.basename(p))[0] for p in args.reports)
    if names[0] == names[1]:
        names = ("a", "b")
    comparison = compare(a, b, names)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "comparison.csv"), "w", encoding="utf-8") as f:
        f.write(comparison.to_csv())
    print(comparison.render())
    return 0


def _parse_grid(kind: str, text: str) -> List[Any]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("empty grid")
    if kind in (SWEEP_LAYERS, SWEEP_HEAD_INIT):
        allowed = LAYER_CHOICES if kind == SWEEP_LAYERS else HEAD_INITS
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ConfigError(f"invalid {kind} values: {bad}")
        return values
    try:
        return [float(v) if kind == "lr" else int(v) for v in values]
    except ValueError as e:
        raise ConfigError(f"invalid {kind} grid: {text}") from e


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    """Sweep one calibration or combination knob."""
    grid = _parse_grid(args.kind, args.grid)
    train, eval_set = _datasets(config, _cache(args))
    if args.head:
        original = load_head(args.head)
    else:
        original, _ = train_standard(
            train, config.head_spec(), config.standard_schedule(), streams.substream(config.seed, streams.TRAIN)
        )
    base = SweepBase(
        train_set=train,
        eval_set=eval_set,
        original_head=original,
        calib=config.calib_config(),
        combine=config.combine_config(),
        bin_scheme=config.instance_bins(),
        seed=config.seed,
    )
    result = sweep(args.kind, grid, base, workers=args.workers or int(config.get("run", "workers")))
    path = os.path.join(args.out, f"sweep_{args.kind}.csv")
    result.write_csv(path)
    config.write(os.path.join(args.out, "config.ini"))
    print(path)
    return 1 if result.failed else 0


def cmd_repro(args: argparse.Namespace, config: RunConfig) -> int:
    """Run named experiments; exit 0 only if every verdict held."""
    names = list(EXPERIMENTS) if args.experiments == ["all"] else args.experiments
    unknown = [n for n in names if n not in EXPERIMENTS]
    if unknown:
        raise ConfigError(f"unknown experiment(s): {', '.join(unknown)}")
    cache = _cache(args)
    verdicts: List[Dict[str, Any]] = []
    ok = True
    for name in names:
        try:
            verdict = run_experiment(name, config, os.path.join(args.out, name), cache)
        except ExperimentFailed as e:
            logger.error("%s", e)
            with open(os.path.join(args.out, name, "verdict.json"), "r", encoding="utf-8") as f:
                verdict = json.load(f)
        verdicts.append(verdict)
        ok = ok and verdict["all_passed"]
    print(render_verdicts(verdicts))
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "repro": cmd_repro,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI sections)")
    common.add_argument("--out", help="output directory (default: $SIMCAL_LAB_OUT/<command>)")
    common.add_argument("--seed", type=int, help="root seed, overrides run.seed")
    common.add_argument("--quiet", action="store_true", help="warnings only, no banner")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--no-cache", action="store_true", help="always regenerate datasets")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")

    parser = argparse.ArgumentParser(prog="simcal-lab", description="Long-tail calibration desk lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate datasets")

    p = sub.add_parser("train", parents=[common], help="train the original head")
    p.add_argument("--dataset", help="training dataset JSON (generated when omitted)")

    p = sub.add_parser("calibrate", parents=[common], help="calibrate a trained head")
    p.add_argument("--dataset", help="training dataset JSON (generated when omitted)")
    p.add_argument("--head", required=True, help="original head JSON")

    p = sub.add_parser("eval", parents=[common], help="evaluate heads")
    p.add_argument("--dataset", help="training dataset JSON, for bin membership")
    p.add_argument("--eval-dataset", help="evaluation dataset JSON")
    p.add_argument("--head", help="head JSON (the calibrated head when --original is given)")
    p.add_argument("--original", help="original head JSON for dual-head inference")
    p.add_argument("--scheme", choices=SCHEMES, help="combination scheme")
    p.add_argument("--oracle", action="store_true", help="evaluate the props-gt oracle")

    p = sub.add_parser("compare", parents=[common], help="compare two reports")
    p.add_argument("reports", nargs=2, help="report JSON files")

    p = sub.add_parser("ablate", parents=[common], help="sweep one knob")
    p.add_argument("kind", choices=SWEEP_KINDS)
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--head", help="original head JSON (trained when omitted)")
    p.add_argument("--workers", type=int, default=0, help="parallel grid points")

    p = sub.add_parser("repro", parents=[common], help="run named experiments")
    p.add_argument("experiments", nargs="+", metavar="NAME", help=f"'all' or any of: {', '.join(EXPERIMENTS)}")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet, args.verbose)
    try:
        config = RunConfig.load(args.config, _overrides(args))
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return 2
    args.out = args.out or os.path.join(output_root(), args.command)
    if not args.quiet:
        _banner(args.command, config, args.out)
    try:
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error("%s failed: %s", args.command, e)
        return 2
    except (SimCalError, ArithmeticError, OSError, ValueError) as e:
        logger.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 1


def cli_main():
    """CLI entry point for setuptools."""
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("🛑 Interrupted", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    cli_main()
