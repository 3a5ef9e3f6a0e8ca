"""Named reproduction pipelines and their output directories.

Every experiment writes ``config.ini`` (fully resolved), its heads, reports
and CSVs, ``manifest.json`` (root seed, stream names, SHA-256 per artefact)
and ``verdict.json`` listing which expected orderings held.
"""

import csv
import hashlib
import io
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as streams
from .cache import DatasetCache, dataset_key
from .combine import CAL_ONLY, ORIG_ONLY, SCHEMES, CombineConfig, batch_combine
from .config import RunConfig
from .core_types import ClassStats, ConfigError, SimCalError
from .evaluator import EvalReport, accuracy_by_bin, compare, dominates, evaluate, report_row
from .head import (
    FOCAL,
    MARGIN,
    REWEIGHT,
    HeadParams,
    HeadSpec,
    LossConfig,
    grad_check,
    head_to_dict,
    init_head,
    predict_proba,
)
from .sampling import epoch_inflation, image_repeat_factors
from .synth import SynthConfig, SynthDataset, generate, generate_eval, subsample_coco_lt, summarize
from .trainer import (
    HEAD_INITS,
    LAYER_CHOICES,
    REPEAT_FACTOR,
    SWEEP_CAL_STEPS,
    SWEEP_HEAD_INIT,
    SWEEP_LAYERS,
    SWEEP_LR,
    SWEEP_T,
    SweepBase,
    SweepResult,
    calibrate,
    calibrate_with_alternative,
    props_gt_oracle,
    repeat_runs,
    sweep,
    train_standard,
)

logger = logging.getLogger(__name__)

T_GRID = (10, 20, 50, 100, 200, 300, 500, 1000)
LR_GRID = (0.001, 0.002, 0.005, 0.01, 0.02, 0.04, 0.06, 0.08)
CAL_STEP_FRACTIONS = (0.0, 1 / 24, 1 / 12, 1 / 6, 1 / 3, 1 / 2, 2 / 3, 5 / 6, 1.0)
GRADCHECK_SEEDS = 20
COCO_LT_BASE = {"num_classes": 80, "head_tail_ratio": 10.0, "max_instances_per_head_class": 2000}
MEANSTD_RUNS = 5


class ExperimentFailed(SimCalError):
    """A pipeline stage raised; partial outputs are kept on disk."""

    def __init__(self, experiment: str, stage: str, error: BaseException):
        super().__init__(f"{experiment}: stage '{stage}' failed: {type(error).__name__}: {error}")
        self.experiment = experiment
        self.stage = stage
        self.error = error


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _csv_text(columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _cell(row.get(c, "")) for c in columns})
    return out.getvalue()


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


@dataclass
class ExperimentContext:
    """Output directory, configuration and bookkeeping of one experiment."""

    name: str
    config: RunConfig
    out_dir: str
    cache: Optional[DatasetCache] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    verdicts: Dict[str, bool] = field(default_factory=dict)
    stage: str = "setup"
    streams_used: List[str] = field(default_factory=list)

    def __post_init__(self):
        os.makedirs(self.out_dir, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.config.seed

    def rng(self, *names: str) -> np.random.Generator:
        self.streams_used.append("/".join(names))
        return streams.substream(self.seed, *names)

    def write_bytes(self, relpath: str, data: bytes) -> str:
        path = os.path.join(self.out_dir, relpath)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
        self.artifacts[relpath] = _sha256(data)
        return path

    def write_text(self, relpath: str, text: str) -> str:
        return self.write_bytes(relpath, text.encode("utf-8"))

    def write_json(self, relpath: str, obj: Any) -> str:
        return self.write_text(relpath, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_csv(self, relpath: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
        return self.write_text(relpath, _csv_text(columns, rows))

    def write_head(self, relpath: str, head: HeadParams) -> str:
        return self.write_text(relpath, json.dumps(head_to_dict(head)))

    def write_report(self, relpath: str, report: EvalReport) -> str:
        return self.write_text(relpath, report.to_json() + "\n")

    @contextmanager
    def step(self, stage: str) -> Iterator[None]:
        self.stage = stage
        logger.info("[%s] %s", self.name, stage)
        yield

    def verdict(self, name: str, holds: bool) -> None:
        self.verdicts[name] = bool(holds)
        logger.info("[%s] verdict %s: %s", self.name, name, "held" if holds else "FAILED")

    def finish(self, failed_stage: Optional[str] = None, error: Optional[str] = None) -> Dict[str, Any]:
        verdict: Dict[str, Any] = {
            "experiment": self.name,
            "verdicts": self.verdicts,
            "all_passed": failed_stage is None and all(self.verdicts.values()),
        }
        if failed_stage is not None:
            verdict["failed_stage"] = failed_stage
            verdict["error"] = error
        self.write_json("verdict.json", verdict)
        manifest = {
            "experiment": self.name,
            "root_seed": self.seed,
            "streams": sorted(set(self.streams_used)),
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        data = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
        with open(os.path.join(self.out_dir, "manifest.json"), "wb") as f:
            f.write(data)
        return verdict


# -- shared pipeline stages --------------------------------------------------


def _cached(ctx: ExperimentContext, key: Dict[str, Any], factory: Callable[[], SynthDataset]) -> SynthDataset:
    if ctx.cache is None:
        return factory()
    return ctx.cache.get_or_create(key, factory)


def load_datasets(ctx: ExperimentContext, synth: Optional[SynthConfig] = None) -> Tuple[SynthDataset, SynthDataset]:
    synth = synth or ctx.config.synth_config()
    per_class = ctx.config.eval_instances_per_class()
    ctx.streams_used.extend([f"{streams.DATASET}/train", f"{streams.DATASET}/eval"])
    train = _cached(ctx, dataset_key("train", synth), lambda: generate(synth))
    eval_set = _cached(
        ctx, dataset_key("eval", synth, instances_per_class=per_class), lambda: generate_eval(synth, per_class)
    )
    ctx.write_json("dataset_summary.json", summarize(train, ctx.config.instance_bins(), ctx.config.image_sets()))
    return train, eval_set


def train_original(ctx: ExperimentContext, train: SynthDataset, relpath: str = "original_head.json") -> HeadParams:
    head, log = train_standard(train, ctx.config.head_spec(), ctx.config.standard_schedule(), ctx.rng(streams.TRAIN))
    ctx.write_head(relpath, head)
    ctx.write_text(relpath.replace(".json", "_log.jsonl"), log.to_jsonl())
    return head


def calibrate_original(
    ctx: ExperimentContext, train: SynthDataset, original: HeadParams, relpath: str = "calibrated_head.json"
) -> HeadParams:
    head, log = calibrate(train, original, ctx.config.calib_config(), ctx.rng(streams.CALIBRATE))
    ctx.write_head(relpath, head)
    ctx.write_text(relpath.replace(".json", "_log.jsonl"), log.to_jsonl())
    return head


def _evaluate(ctx: ExperimentContext, head: HeadParams, eval_set: SynthDataset, train: SynthDataset, **meta) -> EvalReport:
    return evaluate(
        predict_proba(head, eval_set.features),
        eval_set,
        ctx.config.instance_bins(),
        train.stats,
        ctx.config.image_sets(),
        metadata=meta,
    )


def _evaluate_scores(ctx: ExperimentContext, scores, eval_set: SynthDataset, train: SynthDataset, **meta) -> EvalReport:
    return evaluate(scores, eval_set, ctx.config.instance_bins(), train.stats, ctx.config.image_sets(), metadata=meta)


def _dual(
    ctx: ExperimentContext,
    calibrated: HeadParams,
    original: HeadParams,
    eval_set: SynthDataset,
    train: SynthDataset,
    combine_cfg: Optional[CombineConfig] = None,
    **meta,
) -> EvalReport:
    cfg = combine_cfg or ctx.config.combine_config()
    scores = batch_combine(
        predict_proba(calibrated, eval_set.features), predict_proba(original, eval_set.features), train.stats, cfg
    )
    return _evaluate_scores(ctx, scores, eval_set, train, **meta)


def _tune_T(
    ctx: ExperimentContext, calibrated: HeadParams, original: HeadParams, eval_set: SynthDataset, train: SynthDataset
) -> Tuple[int, EvalReport, List[Dict[str, Any]]]:
    base = ctx.config.combine_config()
    rows = []
    best: Optional[Tuple[int, EvalReport]] = None
    for T in T_GRID:
        report = _dual(ctx, calibrated, original, eval_set, train, replace(base, T=T), predictor="dual", T=T)
        rows.append(report_row(report, T=T))
        if best is None or (report.overall_ap or 0.0) > (best[1].overall_ap or 0.0):
            best = (T, report)
    return best[0], best[1], rows


def _metric_names(ctx: ExperimentContext) -> List[str]:
    return list(ctx.config.instance_bins().bin_names()) + list(ctx.config.image_sets().bin_names()) + ["ap"]


def _get(report: EvalReport, metric: str) -> float:
    value = report.metrics()[metric]
    return float("nan") if value is None else value


def _first_bin(ctx: ExperimentContext) -> str:
    return ctx.config.instance_bins().bin_names()[0]


def _last_bin(ctx: ExperimentContext) -> str:
    return ctx.config.instance_bins().bin_names()[-1]


# -- experiments -------------------------------------------------------------


def exp_fig1c(ctx: ExperimentContext) -> None:
    """Biased original head against the label oracle, AP and accuracy per bin."""
    with ctx.step("datasets"):
        train, eval_set = load_datasets(ctx)
    with ctx.step("train original head"):
        original = train_original(ctx, train)
    with ctx.step("evaluate"):
        orig_report = _evaluate(ctx, original, eval_set, train, predictor="original")
        oracle = props_gt_oracle(eval_set, train.stats, ctx.config.instance_bins(), ctx.config.image_sets())
        ctx.write_report("report_original.json", orig_report)
        ctx.write_report("report_props_gt.json", oracle)
        columns = ["predictor"] + _metric_names(ctx)
        ctx.write_csv(
            "fig1c.csv",
            columns,
            [report_row(oracle, predictor="props-gt"), report_row(orig_report, predictor="original")],
        )
        acc = accuracy_by_bin(predict_proba(original, eval_set.features), eval_set, ctx.config.instance_bins(), train.stats)
        names = ctx.config.instance_bins().bin_names()
        ctx.write_csv("accuracy_by_bin.csv", ["bin", "accuracy"], [{"bin": n, "accuracy": a} for n, a in zip(names, acc)])
    ctx.verdict("oracle_dominates_original", dominates(oracle, orig_report))
    ctx.verdict("original_tail_below_head", _get(orig_report, _first_bin(ctx)) < _get(orig_report, _last_bin(ctx)))


def _table3_core(ctx: ExperimentContext, train: SynthDataset, eval_set: SynthDataset, prefix: str = "") -> None:
    with ctx.step(f"{prefix}train original head"):
        original = train_original(ctx, train, f"{prefix}original_head.json")
    with ctx.step(f"{prefix}calibrate"):
        calibrated = calibrate_original(ctx, train, original, f"{prefix}calibrated_head.json")
    with ctx.step(f"{prefix}evaluate"):
        orig = _evaluate(ctx, original, eval_set, train, predictor="original")
        cal = _evaluate(ctx, calibrated, eval_set, train, predictor="calibrated")
        best_T, dual, t_rows = _tune_T(ctx, calibrated, original, eval_set, train)
        for name, report in (("original", orig), ("calibrated", cal), ("dual", dual)):
            ctx.write_report(f"{prefix}report_{name}.json", report)
        columns = ["predictor", "T"] + _metric_names(ctx)
        ctx.write_csv(
            f"{prefix}table3.csv",
            columns,
            [
                report_row(orig, predictor="original", T=""),
                report_row(cal, predictor="calibrated", T=""),
                report_row(dual, predictor="dual", T=best_T),
            ],
        )
        ctx.write_csv(f"{prefix}dual_T_grid.csv", ["T"] + _metric_names(ctx), t_rows)
        ctx.write_text(f"{prefix}comparison.txt", compare(orig, cal, ("original", "calibrated")).render() + "\n")
    first, last = _first_bin(ctx), _last_bin(ctx)
    ctx.verdict(f"{prefix}tail_gain_at_least_5_points", _get(cal, first) - _get(orig, first) >= 0.05)
    ctx.verdict(f"{prefix}head_drops_after_calibration", _get(cal, last) < _get(orig, last))
    ctx.verdict(f"{prefix}dual_restores_head", _get(dual, last) >= _get(cal, last))
    ctx.verdict(f"{prefix}dual_overall_at_least_original", _get(dual, "ap") >= _get(orig, "ap"))


def exp_table3(ctx: ExperimentContext) -> None:
    """Original vs calibrated vs dual-head, T tuned on the default grid."""
    with ctx.step("datasets"):
        train, eval_set = load_datasets(ctx)
    _table3_core(ctx, train, eval_set)
    repeats = int(ctx.config.get("run", "repeats"))
    if repeats > 1:
        with ctx.step("repeats"):
            _write_repeats(ctx, "table3_repeats.csv", range(repeats))


def _seed_reports(ctx: ExperimentContext, offset: int) -> Dict[str, EvalReport]:
    """Original, calibrated and dual-head reports of one shifted-seed run."""
    config = ctx.config.with_overrides({"run.seed": ctx.seed + offset})
    sub = ExperimentContext(f"{ctx.name}-seed{offset}", config, os.path.join(ctx.out_dir, f"seed_{offset}"), ctx.cache)
    train, eval_set = load_datasets(sub)
    original = train_original(sub, train)
    calibrated = calibrate_original(sub, train, original)
    reports = {
        "original": _evaluate(sub, original, eval_set, train, predictor="original"),
        "calibrated": _evaluate(sub, calibrated, eval_set, train, predictor="calibrated"),
        "dual": _dual(sub, calibrated, original, eval_set, train, predictor="dual"),
    }
    for name, report in reports.items():
        sub.write_report(f"report_{name}.json", report)
    ctx.artifacts.update({f"seed_{offset}/{path}": digest for path, digest in sub.artifacts.items()})
    ctx.streams_used.extend(sub.streams_used)
    return reports


def _write_repeats(ctx: ExperimentContext, relpath: str, seeds: Sequence[int], predictors=("original", "calibrated", "dual")) -> Dict[str, Any]:
    by_seed: Dict[int, Dict[str, EvalReport]] = {}

    def reports_for(offset: int) -> Dict[str, EvalReport]:
        if offset not in by_seed:
            by_seed[offset] = _seed_reports(ctx, offset)
        return by_seed[offset]

    rows = []
    summaries = {}
    for predictor in predictors:
        summary = repeat_runs(lambda offset, p=predictor: reports_for(offset)[p], list(seeds))
        summaries[predictor] = summary
        for metric, stats in summary.items():
            rows.append({"predictor": predictor, "metric": metric, **{k: stats[k] for k in ("mean", "std", "median")}})
    ctx.write_csv(relpath, ["predictor", "metric", "mean", "std", "median"], rows)
    return summaries


def exp_table4(ctx: ExperimentContext) -> None:
    """Long-tail losses and repeat-factor sampling, in training and as calibration."""
    with ctx.step("datasets"):
        train, eval_set = load_datasets(ctx)
    with ctx.step("train original head"):
        original = train_original(ctx, train)
    base_loss = ctx.config.loss_config()
    alternatives = {
        REWEIGHT: replace(base_loss, kind=REWEIGHT),
        FOCAL: replace(base_loss, kind=FOCAL),
        MARGIN: replace(base_loss, kind=MARGIN),
    }
    rows = []
    reports: Dict[str, EvalReport] = {}

    def add(name: str, stage: str, report: EvalReport) -> None:
        reports[name] = report
        rows.append(report_row(report, method=name, stage=stage))
        ctx.write_report(f"reports/{name}.json", report)

    with ctx.step("evaluate original"):
        add("original", "none", _evaluate(ctx, original, eval_set, train))
    sampler_cfg = ctx.config.sampler_config()
    for kind, loss in alternatives.items():
        with ctx.step(f"train with {kind}"):
            head, _ = train_standard(
                train, ctx.config.head_spec(), ctx.config.standard_schedule(), ctx.rng(streams.TRAIN, kind), loss
            )
            ctx.write_head(f"heads/train_{kind}.json", head)
            add(f"train_{kind}", "training", _evaluate(ctx, head, eval_set, train))
    with ctx.step("train with repeat-factor sampling"):
        factors = image_repeat_factors(train, sampler_cfg.repeat_threshold, sampler_cfg.repeat_exponent)
        ctx.write_json("repeat_factor_inflation.json", {"images": train.num_images, "extra_per_epoch": epoch_inflation(factors)})
        head, _ = train_standard(
            train,
            ctx.config.head_spec(),
            ctx.config.standard_schedule(),
            ctx.rng(streams.TRAIN, REPEAT_FACTOR),
            sampling=REPEAT_FACTOR,
            sampler_cfg=sampler_cfg,
        )
        ctx.write_head("heads/train_repeat_factor.json", head)
        add("train_repeat_factor", "training", _evaluate(ctx, head, eval_set, train))
    schedule = ctx.config.calibration_schedule()
    for kind, loss in alternatives.items():
        with ctx.step(f"calibrate with {kind}"):
            head, _ = calibrate_with_alternative(
                train, original, loss, schedule, ctx.rng(streams.CALIBRATE, kind), base=ctx.config.calib_config()
            )
            ctx.write_head(f"heads/calibrate_{kind}.json", head)
            add(f"calibrate_{kind}", "calibration", _evaluate(ctx, head, eval_set, train))
            add(f"calibrate_{kind}_dual", "calibration", _dual(ctx, head, original, eval_set, train))
    with ctx.step("calibrate with bi-level sampling"):
        simcal = calibrate_original(ctx, train, original, "heads/calibrate_simcal.json")
        add("calibrate_simcal", "calibration", _evaluate(ctx, simcal, eval_set, train))
        add("calibrate_simcal_dual", "calibration", _dual(ctx, simcal, original, eval_set, train))
    ctx.write_csv("table4.csv", ["method", "stage"] + _metric_names(ctx), rows)
    first = _first_bin(ctx)
    ctx.verdict("margin_calibration_improves_tail", _get(reports["calibrate_margin"], first) > _get(reports["original"], first))
    ctx.verdict("simcal_improves_tail", _get(reports["calibrate_simcal"], first) > _get(reports["original"], first))


def exp_table7(ctx: ExperimentContext) -> None:
    """Every combination scheme on one calibrated/original head pair."""
    with ctx.step("datasets"):
        train, eval_set = load_datasets(ctx)
    with ctx.step("train original head"):
        original = train_original(ctx, train)
    with ctx.step("calibrate"):
        calibrated = calibrate_original(ctx, train, original)
    with ctx.step("combine"):
        base = ctx.config.combine_config()
        reports = {}
        for scheme in SCHEMES:
            reports[scheme] = _dual(ctx, calibrated, original, eval_set, train, replace(base, scheme=scheme), scheme=scheme)
        rows = [report_row(reports[s], scheme=s) for s in SCHEMES]
        ctx.write_csv("table7.csv", ["scheme"] + _metric_names(ctx), rows)
    ap = {s: _get(r, "ap") for s, r in reports.items()}
    ctx.verdict("sel_at_least_avg", ap["sel"] >= ap["avg"])
    ctx.verdict("avg_at_least_original", ap["avg"] >= ap[ORIG_ONLY])
    ctx.verdict("sel_at_least_calibrated", ap["sel"] >= ap[CAL_ONLY])


def _sweep_base(ctx: ExperimentContext) -> SweepBase:
    train, eval_set = load_datasets(ctx)
    original = train_original(ctx, train)
    return SweepBase(
        train_set=train,
        eval_set=eval_set,
        original_head=original,
        calib=ctx.config.calib_config(),
        combine=ctx.config.combine_config(),
        bin_scheme=ctx.config.instance_bins(),
        seed=ctx.seed,
    )


def _run_sweep(ctx: ExperimentContext, kind: str, grid: Sequence[Any], relpath: str) -> Tuple[SweepBase, SweepResult]:
    with ctx.step("datasets and original head"):
        base = _sweep_base(ctx)
    with ctx.step(f"sweep {kind}"):
        result = sweep(kind, grid, base, workers=int(ctx.config.get("run", "workers")))
        ctx.write_csv(relpath, result.columns, result.rows)
    ctx.streams_used.append(f"{streams.CALIBRATE}/sweep/{kind}")
    return base, result


def _column(result: SweepResult, name: str) -> List[float]:
    return [float(r[name]) if r.get("status") == "ok" and r.get(name) not in ("", None) else float("nan") for r in result.rows]


def cal_steps_grid(total_steps: int) -> List[int]:
    return sorted({int(round(f * total_steps)) for f in CAL_STEP_FRACTIONS})


def exp_fig4a(ctx: ExperimentContext) -> None:
    """Tail and overall AP as calibration proceeds."""
    grid = cal_steps_grid(ctx.config.calibration_schedule().total_steps)
    _, result = _run_sweep(ctx, SWEEP_CAL_STEPS, grid, "fig4a.csv")
    tail = _column(result, f"cal_{_first_bin(ctx)}")
    ctx.verdict("tail_ap_rises", tail[-1] > tail[0])
    last_quarter = tail[-max(2, len(tail) // 4) :]
    spread = (max(last_quarter) - min(last_quarter)) / max(abs(max(last_quarter)), 1e-12)
    ctx.verdict("tail_ap_plateaus", spread < 0.01)


def exp_fig4b(ctx: ExperimentContext) -> None:
    """Calibration head initialisations."""
    _, result = _run_sweep(ctx, SWEEP_HEAD_INIT, list(HEAD_INITS), "fig4b.csv")
    dual = dict(zip(HEAD_INITS, _column(result, "dual_ap")))
    ctx.verdict("all_points_ran", not result.failed)
    ctx.verdict("3fc_ft_best", all(dual["3fc_ft"] >= v for v in dual.values()))


def exp_fig4c(ctx: ExperimentContext) -> None:
    """Dual-head AP against the boundary T."""
    base, result = _run_sweep(ctx, SWEEP_T, list(T_GRID), "fig4c.csv")
    orig = _evaluate(ctx, base.original_head, base.eval_set, base.train_set, predictor="original")
    ctx.write_report("report_original.json", orig)
    dual = _column(result, "dual_ap")
    quarter = len(dual) // 4
    middle = dual[quarter : len(dual) - quarter]
    ctx.verdict("plateau_over_middle_half", max(middle) - min(middle) < 0.02)
    best = max(dual)
    ctx.verdict("best_T_beats_both_heads", best > _column(result, "cal_ap")[0] and best > _get(orig, "ap"))


def exp_table8(ctx: ExperimentContext) -> None:
    """Calibration learning rates."""
    _, result = _run_sweep(ctx, SWEEP_LR, list(LR_GRID), "table8.csv")
    ctx.verdict("one_row_per_rate", len(result.rows) == len(LR_GRID))


def exp_table9(ctx: ExperimentContext) -> None:
    """Calibrating the last layer, the last two, or all layers."""
    base, result = _run_sweep(ctx, SWEEP_LAYERS, list(LAYER_CHOICES), "table9.csv")
    orig = _evaluate(ctx, base.original_head, base.eval_set, base.train_set, predictor="original")
    ctx.write_report("report_original.json", orig)
    first = _first_bin(ctx)
    tails = _column(result, f"cal_{first}")
    ctx.verdict("every_variant_improves_tail", all(t > _get(orig, first) for t in tails))


def coco_lt_config(base: SynthConfig) -> SynthConfig:
    """80-class base dataset for COCO-LT thinning.

    The largest class has 2000 instances, so the default scale is 0.025 and
    every subset interval contains an integer.
    """
    return replace(base, **COCO_LT_BASE)


def exp_cocolt(ctx: ExperimentContext) -> None:
    """Exponentially thinned 80-class dataset, then the table3 pipeline."""
    with ctx.step("datasets"):
        synth = coco_lt_config(ctx.config.synth_config())
        full = _cached(ctx, dataset_key("train", synth), lambda: generate(synth))
        seed = streams.child_seed(ctx.seed, "coco_lt")
        ctx.streams_used.append("coco_lt")
        train = _cached(
            ctx,
            dataset_key("coco_lt", synth, seed=seed),
            lambda: subsample_coco_lt(full, 4, seed),
        )
        eval_set = generate_eval(synth, ctx.config.eval_instances_per_class())
        summary = summarize(train, ctx.config.instance_bins(), ctx.config.image_sets())
        ctx.write_json("dataset_summary.json", summary)
    subsets = summary["coco_lt_subsets"]
    ctx.verdict("subsets_inside_intervals", all(s["inside_interval"] for s in subsets))
    ctx.verdict("first_subset_untouched", subsets[0]["total"] == sum(full.stats.instance_counts[:20]))
    ctx.verdict("dataset_consistent", not train.consistency_problems())
    _table3_core(ctx, train, eval_set)


def exp_meanstd(ctx: ExperimentContext) -> None:
    """Original, calibrated and dual-head metrics over repeated seeds."""
    with ctx.step("repeats"):
        summaries = _write_repeats(ctx, "meanstd.csv", range(MEANSTD_RUNS))
    dual, orig = summaries["dual"]["ap"]["mean"], summaries["original"]["ap"]["mean"]
    ctx.verdict("dual_mean_at_least_original", dual is not None and orig is not None and dual >= orig)


def exp_gradcheck(ctx: ExperimentContext) -> None:
    """Finite-difference check of every loss on random small heads."""
    rows = []
    with ctx.step("gradcheck"):
        for kind in ("ce", REWEIGHT, FOCAL, MARGIN):
            cfg = LossConfig(kind=kind, gamma=3.0, margin_c=6.0)
            for seed in range(GRADCHECK_SEEDS):
                rng = ctx.rng("gradcheck", kind, str(seed))
                params, features, labels, stats = gradcheck_instance(rng)
                err = grad_check(params, features, labels, cfg, stats)
                rows.append({"loss": kind, "seed": seed, "max_rel_err": err})
        ctx.write_csv("gradcheck.csv", ["loss", "seed", "max_rel_err"], rows)
    ctx.verdict("all_below_1e-4", all(r["max_rel_err"] < 1e-4 for r in rows))


def gradcheck_instance(
    rng: np.random.Generator, dim: int = 6, classes: int = 4, hidden: Tuple[int, ...] = (6, 6), batch: int = 8
) -> Tuple[HeadParams, np.ndarray, np.ndarray, ClassStats]:
    """Random three-layer head, batch and class counts for a gradient check."""
    params = init_head(dim, classes, HeadSpec(hidden=hidden, last_layer_std=0.5), rng)
    features = rng.normal(0.0, 3.0, size=(batch, dim))
    labels = rng.integers(0, classes + 1, size=batch)
    counts = rng.integers(1, 2000, size=classes)
    return params, features, labels, ClassStats(classes, tuple(counts), tuple(np.maximum(1, counts // 2)))


EXPERIMENTS: Dict[str, Tuple[Callable[[ExperimentContext], None], str]] = {
    "fig1c": (exp_fig1c, "original head vs label oracle per bin"),
    "table3": (exp_table3, "original vs calibrated vs dual-head"),
    "table4": (exp_table4, "long-tail losses and sampling in training and calibration"),
    "table7": (exp_table7, "ways of combining the two heads"),
    "fig4a": (exp_fig4a, "AP as a function of calibration steps"),
    "fig4b": (exp_fig4b, "calibration head initialisation"),
    "fig4c": (exp_fig4c, "effect of the boundary T"),
    "table8": (exp_table8, "calibration learning rate"),
    "table9": (exp_table9, "which layers to calibrate"),
    "cocolt": (exp_cocolt, "thinned 80-class dataset through the table3 pipeline"),
    "meanstd": (exp_meanstd, "mean and spread over repeated seeds"),
    "gradcheck": (exp_gradcheck, "finite-difference gradient check table"),
}


def run_experiment(
    name: str, config: RunConfig, out_dir: str, cache: Optional[DatasetCache] = None
) -> Dict[str, Any]:
    """Run one named experiment into ``out_dir`` and return its verdict.

    Raises:
        ConfigError: for an unknown experiment name.
        ExperimentFailed: when a stage raises; partial outputs stay on disk.
    """
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment: {name!r} (choose from {', '.join(EXPERIMENTS)})")
    ctx = ExperimentContext(name, config, out_dir, cache)
    ctx.write_text("config.ini", config.resolved_text())
    func = EXPERIMENTS[name][0]
    try:
        func(ctx)
    except Exception as e:
        logger.error("%s failed during %s: %s", name, ctx.stage, e)
        ctx.finish(ctx.stage, f"{type(e).__name__}: {e}")
        raise ExperimentFailed(name, ctx.stage, e) from e
    return ctx.finish()


def render_verdicts(verdicts: Sequence[Dict[str, Any]]) -> str:
    """Markdown table of experiment verdicts."""
    lines = ["| experiment | check | held |", "|---|---|---|"]
    for verdict in verdicts:
        for check, held in verdict["verdicts"].items():
            lines.append(f"| {verdict['experiment']} | {check} | {'yes' if held else 'no'} |")
        if "failed_stage" in verdict:
            lines.append(f"| {verdict['experiment']} | stage {verdict['failed_stage']} | failed |")
    return "\n".join(lines)
