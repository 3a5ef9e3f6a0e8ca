"""Standard head training, bi-level calibration, the label oracle and sweeps."""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as streams
from .combine import CombineConfig, batch_combine
from .core_types import (
    BACKGROUND,
    BinScheme,
    ClassStats,
    ConfigError,
    DivergenceError,
    EmptyDatasetError,
    NonFiniteError,
    SimCalError,
    lvis_image_sets,
    lvis_instance_bins,
)
from .evaluator import EvalReport, evaluate, oracle_predictions, report_row, write_rows
from .head import (
    HeadParams,
    HeadSpec,
    LossConfig,
    OptState,
    backward,
    init_head,
    predict_proba,
    sgd_step,
)
from .sampling import BilevelSampler, RepeatFactorSampler, SamplerConfig, random_image_batches
from .synth import SynthDataset

logger = logging.getLogger(__name__)

RANDOM = "random"
REPEAT_FACTOR = "repeat_factor"
SAMPLING_MODES = (RANDOM, REPEAT_FACTOR)

HEAD_2FC_RAND = "2fc_rand"
HEAD_3FC_RAND = "3fc_rand"
HEAD_3FC_FT = "3fc_ft"
HEAD_INITS = (HEAD_2FC_RAND, HEAD_3FC_RAND, HEAD_3FC_FT)

LAYERS_LAST = "last"
LAYERS_LAST2 = "last2"
LAYERS_ALL = "all"
LAYER_CHOICES = (LAYERS_LAST, LAYERS_LAST2, LAYERS_ALL)


@dataclass(frozen=True)
class Schedule:
    """Step learning-rate schedule: ``lr_init * decay_factor**k`` after k decays."""

    total_steps: int
    lr_init: float
    decay_steps: Tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "decay_steps", tuple(int(s) for s in self.decay_steps))
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.lr_init < 0:
            raise ConfigError(f"lr_init must be >= 0, got {self.lr_init}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        steps = self.decay_steps
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"decay steps must be strictly increasing: {steps}")
        if steps and (steps[0] < 1 or steps[-1] >= self.total_steps):
            raise ConfigError(f"decay steps must lie in [1, {self.total_steps}): {steps}")

    def lr_at(self, step: int) -> float:
        decays = sum(1 for s in self.decay_steps if step >= s)
        return self.lr_init * self.decay_factor**decays

    def stretched(self, total_steps: int) -> "Schedule":
        """Same shape with decays moved proportionally to ``total_steps``."""
        if self.total_steps == 0:
            return replace(self, total_steps=total_steps)
        ratio = total_steps / self.total_steps
        decays = sorted({int(round(s * ratio)) for s in self.decay_steps})
        decays = [s for s in decays if 1 <= s < total_steps]
        return Schedule(total_steps, self.lr_init, tuple(decays), self.decay_factor)

    def scaled(self, factor: float) -> "Schedule":
        return self.stretched(max(0, int(round(self.total_steps * factor))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total_steps": self.total_steps,
            "lr_init": self.lr_init,
            "decay_steps": list(self.decay_steps),
            "decay_factor": self.decay_factor,
        }


def standard_schedule(total_steps: int = 4000, lr_init: float = 0.01) -> Schedule:
    """Decays at 2/3 and 11/12 of training."""
    decays = sorted({int(round(total_steps * 2 / 3)), int(round(total_steps * 11 / 12))})
    return Schedule(total_steps, lr_init, tuple(s for s in decays if 1 <= s < total_steps))


def calibration_schedule(scale: float = 1.0, lr_init: float = 0.01) -> Schedule:
    """12000 steps with decays at 8000 and 11000, multiplied by ``scale``."""
    return Schedule(12000, lr_init, (8000, 11000)).scaled(scale)


@dataclass(frozen=True)
class CalibConfig:
    head_init: str = HEAD_3FC_FT
    layers_to_calibrate: str = LAYERS_ALL
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Schedule = field(default_factory=calibration_schedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.head_init not in HEAD_INITS:
            raise ConfigError(f"unknown head_init: {self.head_init!r}")
        if self.layers_to_calibrate not in LAYER_CHOICES:
            raise ConfigError(f"unknown layers_to_calibrate: {self.layers_to_calibrate!r}")


@dataclass
class TrainLog:
    """Per-step records written as JSON lines."""

    entries: List[Dict[str, Any]] = field(default_factory=list)
    snapshots: Dict[int, HeadParams] = field(default_factory=dict)

    def record(self, step: int, lr: float, loss: float, **extra: Any) -> None:
        entry = {"step": step, "lr": lr, "loss": loss}
        entry.update(extra)
        self.entries.append(entry)

    @property
    def losses(self) -> List[float]:
        return [e["loss"] for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path: str) -> "TrainLog":
        with open(path, "r", encoding="utf-8") as f:
            return cls([json.loads(line) for line in f if line.strip()])


def _check_trainable(dataset: SynthDataset) -> None:
    if dataset.num_images == 0:
        raise EmptyDatasetError("training needs at least one image")
    labels = dataset.labels
    if not np.any(labels == BACKGROUND) or not np.any(labels != BACKGROUND):
        raise ConfigError("training needs both foreground and background proposals")


def _image_batch_proposals(dataset: SynthDataset, images: np.ndarray) -> np.ndarray:
    parts = [dataset.image_proposals[int(i)] for i in images]
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def _step(
    dataset: SynthDataset,
    params: HeadParams,
    proposals: np.ndarray,
    loss_cfg: LossConfig,
    trainable: Optional[Iterable[int]],
    opt: OptState,
    log: TrainLog,
    step: int,
) -> HeadParams:
    try:
        loss, grads = backward(params, dataset.features[proposals], dataset.labels[proposals], loss_cfg, dataset.stats)
    except NonFiniteError as e:
        raise DivergenceError(step, float("nan")) from e
    if not np.isfinite(loss):
        raise DivergenceError(step, loss)
    log.record(step, opt.lr, loss)
    return sgd_step(params, grads, opt, trainable)


def _run(
    dataset: SynthDataset,
    params: HeadParams,
    schedule: Schedule,
    batches: Iterator[np.ndarray],
    loss_cfg: LossConfig,
    trainable: Optional[Iterable[int]],
    log: TrainLog,
    snapshot_steps: Sequence[int] = (),
    stage: str = "train",
) -> HeadParams:
    opt = OptState.zeros_like(params, schedule.lr_init)
    snapshots = set(snapshot_steps)
    if 0 in snapshots:
        log.snapshots[0] = params.copy()
    for step in range(schedule.total_steps):
        proposals = next(batches)
        opt.lr = schedule.lr_at(step)
        if len(proposals) == 0:
            logger.debug("%s step %d: empty batch skipped", stage, step)
        else:
            params = _step(dataset, params, proposals, loss_cfg, trainable, opt, log, step)
            if step % 500 == 0:
                logger.debug("%s step %d lr %.5f loss %.5f", stage, step, opt.lr, log.entries[-1]["loss"])
        if step + 1 in snapshots:
            log.snapshots[step + 1] = params.copy()
    return params


def train_standard(
    dataset: SynthDataset,
    head_spec: HeadSpec,
    schedule: Schedule,
    rng: np.random.Generator,
    loss_cfg: Optional[LossConfig] = None,
    sampling: str = RANDOM,
    sampler_cfg: Optional[SamplerConfig] = None,
) -> Tuple[HeadParams, TrainLog]:
    """Train every head layer on all proposals of randomly drawn images.

    ``loss_cfg`` and ``sampling`` select the training-time long-tail
    variants; the defaults give the plain cross-entropy original head.

    Raises:
        DivergenceError: if the loss becomes non-finite.
    """
    _check_trainable(dataset)
    loss_cfg = loss_cfg or LossConfig()
    sampler_cfg = sampler_cfg or SamplerConfig()
    if sampling not in SAMPLING_MODES:
        raise ConfigError(f"unknown sampling mode: {sampling!r}")
    params = init_head(dataset.feature_dim, dataset.num_classes, head_spec, rng)
    if sampling == RANDOM:
        images = random_image_batches(dataset, sampler_cfg.random_batch_images, rng)
    else:
        images = RepeatFactorSampler(dataset, sampler_cfg, rng).batches()
    batches = (_image_batch_proposals(dataset, b) for b in images)
    log = TrainLog()
    logger.info(
        "standard training: %d steps, loss %s, %s sampling, head %s",
        schedule.total_steps,
        loss_cfg.kind,
        sampling,
        params.widths,
    )
    params = _run(dataset, params, schedule, batches, loss_cfg, None, log, stage="train")
    return params, log


def trainable_layers(num_layers: int, layers_to_calibrate: str) -> List[int]:
    if layers_to_calibrate == LAYERS_LAST:
        return [num_layers - 1]
    if layers_to_calibrate == LAYERS_LAST2:
        return list(range(max(0, num_layers - 2), num_layers))
    return list(range(num_layers))


def calibration_head(
    original: HeadParams, head_init: str, rng: np.random.Generator, spec: Optional[HeadSpec] = None
) -> HeadParams:
    """Starting head for calibration.

    ``3fc_ft`` copies the original three-layer head; ``3fc_rand`` and
    ``2fc_rand`` draw fresh layers with the original's widths, the latter
    with a single hidden layer.

    Raises:
        ConfigError: for ``3fc_ft`` when the original head is not three layers.
    """
    spec = spec or HeadSpec()
    widths = original.widths
    if head_init == HEAD_3FC_FT:
        if original.num_layers != 3:
            raise ConfigError(f"3fc_ft needs a trained 3-layer original head, got {original.num_layers} layers")
        return original.copy()
    hidden = widths[1:-1] if head_init == HEAD_3FC_RAND else widths[1:2]
    if head_init == HEAD_2FC_RAND and original.num_layers < 2:
        hidden = spec.hidden[:1]
    return init_head(widths[0], original.num_classes, replace(spec, hidden=tuple(hidden)), rng)


def _bilevel_batches(dataset: SynthDataset, sampler_cfg: SamplerConfig, rng: np.random.Generator) -> Iterator[np.ndarray]:
    sampler = BilevelSampler(dataset, sampler_cfg, rng)
    for batch in sampler:
        yield batch.indices()


def calibrate(
    dataset: SynthDataset,
    original_head: HeadParams,
    cfg: CalibConfig,
    rng: np.random.Generator,
    snapshot_steps: Sequence[int] = (),
) -> Tuple[HeadParams, TrainLog]:
    """Retrain the head under bi-level batches; frozen layers stay bit-identical.

    The per-batch loss is the mean per-proposal loss over the sampled classes
    and background. Heads at ``snapshot_steps`` are kept in ``log.snapshots``.
    """
    _check_trainable(dataset)
    params = calibration_head(original_head, cfg.head_init, rng)
    trainable = trainable_layers(params.num_layers, cfg.layers_to_calibrate)
    logger.info(
        "calibration: %s head, layers %s, %d steps at lr %g",
        cfg.head_init,
        trainable,
        cfg.schedule.total_steps,
        cfg.schedule.lr_init,
    )
    log = TrainLog()
    batches = _bilevel_batches(dataset, cfg.sampler, rng)
    params = _run(dataset, params, cfg.schedule, batches, cfg.loss, trainable, log, snapshot_steps, "calibrate")
    return params, log


def calibrate_with_alternative(
    dataset: SynthDataset,
    original_head: HeadParams,
    alt_loss: LossConfig,
    schedule: Schedule,
    rng: np.random.Generator,
    bilevel: bool = False,
    base: Optional[CalibConfig] = None,
) -> Tuple[HeadParams, TrainLog]:
    """Calibrate with a long-tail loss instead of bi-level class balancing.

    Random image batches (every proposal of the drawn images) are used unless
    ``bilevel`` is set.
    """
    base = base or CalibConfig()
    if not bilevel:
        _check_trainable(dataset)
        params = calibration_head(original_head, base.head_init, rng)
        trainable = trainable_layers(params.num_layers, base.layers_to_calibrate)
        images = random_image_batches(dataset, base.sampler.random_batch_images, rng)
        batches = (_image_batch_proposals(dataset, b) for b in images)
        log = TrainLog()
        logger.info("calibration with %s loss on random batches: %d steps", alt_loss.kind, schedule.total_steps)
        return _run(dataset, params, schedule, batches, alt_loss, trainable, log, stage="calibrate"), log
    return calibrate(dataset, original_head, replace(base, loss=alt_loss, schedule=schedule), rng)


def props_gt_oracle(
    dataset: SynthDataset,
    train_stats: Optional[ClassStats] = None,
    bin_scheme: Optional[BinScheme] = None,
    set_scheme: Optional[BinScheme] = None,
) -> EvalReport:
    """Evaluate one-hot predictions on every proposal's assigned label."""
    return evaluate(
        oracle_predictions(dataset),
        dataset,
        bin_scheme,
        train_stats=train_stats,
        set_scheme=set_scheme,
        metadata={"predictor": "props-gt"},
    )


def evaluate_head(
    head: HeadParams,
    eval_set: SynthDataset,
    train_stats: ClassStats,
    bin_scheme: Optional[BinScheme] = None,
    **metadata: Any,
) -> EvalReport:
    return evaluate(predict_proba(head, eval_set.features), eval_set, bin_scheme, train_stats, metadata=metadata)


def evaluate_dual(
    calibrated: HeadParams,
    original: HeadParams,
    eval_set: SynthDataset,
    train_stats: ClassStats,
    combine_cfg: CombineConfig,
    bin_scheme: Optional[BinScheme] = None,
    **metadata: Any,
) -> EvalReport:
    p_cal = predict_proba(calibrated, eval_set.features)
    p_orig = predict_proba(original, eval_set.features)
    scores = batch_combine(p_cal, p_orig, train_stats, combine_cfg)
    return evaluate(scores, eval_set, bin_scheme, train_stats, metadata=metadata)


# -- sweeps ------------------------------------------------------------------

SWEEP_CAL_STEPS = "cal_steps"
SWEEP_LR = "lr"
SWEEP_T = "T"
SWEEP_LAYERS = "layers"
SWEEP_HEAD_INIT = "head_init"
SWEEP_KINDS = (SWEEP_CAL_STEPS, SWEEP_LR, SWEEP_T, SWEEP_LAYERS, SWEEP_HEAD_INIT)


@dataclass(frozen=True, eq=False)
class SweepBase:
    """Everything a sweep point needs besides the knob it varies."""

    train_set: SynthDataset
    eval_set: SynthDataset
    original_head: HeadParams
    calib: CalibConfig = field(default_factory=CalibConfig)
    combine: CombineConfig = field(default_factory=CombineConfig)
    bin_scheme: BinScheme = field(default_factory=lvis_instance_bins)
    seed: int = 0
    calibrated_head: Optional[HeadParams] = None


@dataclass
class SweepResult:
    kind: str
    columns: List[str]
    rows: List[Dict[str, Any]]

    @property
    def failed(self) -> List[Dict[str, Any]]:
        return [r for r in self.rows if r["status"] != "ok"]

    def write_csv(self, path: str) -> None:
        write_rows(path, self.columns, self.rows)


def _metric_columns(bin_scheme: BinScheme) -> List[str]:
    names = list(bin_scheme.bin_names()) + list(lvis_image_sets().bin_names()) + ["ap"]
    return [f"{prefix}{n}" for prefix in ("cal_", "dual_") for n in names]


def _point_row(
    kind: str, value: Any, calibrated: HeadParams, base: SweepBase, combine_cfg: Optional[CombineConfig] = None
) -> Dict[str, Any]:
    stats = base.train_set.stats
    cal = evaluate_head(calibrated, base.eval_set, stats, base.bin_scheme)
    dual = evaluate_dual(calibrated, base.original_head, base.eval_set, stats, combine_cfg or base.combine, base.bin_scheme)
    row = {"kind": kind, "value": value, "status": "ok", "error": ""}
    row.update(report_row(cal, prefix="cal_"))
    row.update(report_row(dual, prefix="dual_"))
    return row


def _failed_row(kind: str, value: Any, error: BaseException) -> Dict[str, Any]:
    logger.warning("sweep %s=%s failed: %s", kind, value, error)
    return {"kind": kind, "value": value, "status": "failed", "error": f"{type(error).__name__}: {error}"}


def _point_config(kind: str, value: Any, calib: CalibConfig) -> CalibConfig:
    if kind == SWEEP_LR:
        return replace(calib, schedule=replace(calib.schedule, lr_init=float(value)))
    if kind == SWEEP_LAYERS:
        return replace(calib, layers_to_calibrate=str(value))
    if kind == SWEEP_HEAD_INIT:
        return replace(calib, head_init=str(value))
    raise ConfigError(f"{kind} is not a per-point sweep")


def _run_point(kind: str, value: Any, base: SweepBase) -> Dict[str, Any]:
    try:
        cfg = _point_config(kind, value, base.calib)
        rng = streams.substream(base.seed, streams.CALIBRATE, "sweep", kind, str(value))
        calibrated, _ = calibrate(base.train_set, base.original_head, cfg, rng)
        return _point_row(kind, value, calibrated, base)
    except (SimCalError, ArithmeticError, ValueError) as e:
        return _failed_row(kind, value, e)


def sweep(kind: str, grid: Sequence[Any], base: SweepBase, workers: int = 1) -> SweepResult:
    """One row of calibrated and dual-head metrics per grid point.

    ``lr``, ``layers`` and ``head_init`` points are independent runs and may
    go to a process pool. ``cal_steps`` snapshots a single run stretched to
    the largest grid value; ``T`` reuses one calibrated head.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind: {kind!r}")
    if len(grid) == 0:
        raise ConfigError("sweep grid is empty")
    columns = ["kind", "value", "status", "error"] + _metric_columns(base.bin_scheme)
    logger.info("sweep %s over %d points", kind, len(grid))

    if kind == SWEEP_T:
        rows = _sweep_T(grid, base)
    elif kind == SWEEP_CAL_STEPS:
        rows = _sweep_cal_steps(grid, base)
    elif workers > 1:
        with Pool(workers) as pool:
            rows = pool.starmap(_run_point, [(kind, v, base) for v in grid])
    else:
        rows = [_run_point(kind, v, base) for v in grid]
    return SweepResult(kind, columns, rows)


def _sweep_T(grid: Sequence[Any], base: SweepBase) -> List[Dict[str, Any]]:
    calibrated = base.calibrated_head
    if calibrated is None:
        try:
            rng = streams.substream(base.seed, streams.CALIBRATE, "sweep", SWEEP_T)
            calibrated, _ = calibrate(base.train_set, base.original_head, base.calib, rng)
        except (SimCalError, ArithmeticError, ValueError) as e:
            return [_failed_row(SWEEP_T, v, e) for v in grid]
    rows = []
    for value in grid:
        try:
            cfg = replace(base.combine, T=int(value))
            rows.append(_point_row(SWEEP_T, int(value), calibrated, base, cfg))
        except (SimCalError, ArithmeticError, ValueError) as e:
            rows.append(_failed_row(SWEEP_T, value, e))
    return rows


def _sweep_cal_steps(grid: Sequence[Any], base: SweepBase) -> List[Dict[str, Any]]:
    steps = sorted({int(v) for v in grid})
    if steps[0] < 0:
        raise ConfigError("calibration steps must be >= 0")
    schedule = base.calib.schedule.stretched(steps[-1])
    try:
        rng = streams.substream(base.seed, streams.CALIBRATE, "sweep", SWEEP_CAL_STEPS)
        _, log = calibrate(base.train_set, base.original_head, replace(base.calib, schedule=schedule), rng, steps)
    except (SimCalError, ArithmeticError, ValueError) as e:
        return [_failed_row(SWEEP_CAL_STEPS, v, e) for v in grid]
    rows = []
    for value in grid:
        head = log.snapshots.get(int(value))
        if head is None:
            rows.append(_failed_row(SWEEP_CAL_STEPS, value, ConfigError(f"no snapshot at step {value}")))
            continue
        rows.append(_point_row(SWEEP_CAL_STEPS, int(value), head, base))
    return rows


# -- repeated runs -----------------------------------------------------------


def repeat_runs(pipeline: Callable[[int], EvalReport], seeds: Sequence[int]) -> Dict[str, Dict[str, Any]]:
    """Mean, standard deviation and median of every report metric over seeds."""
    if not seeds:
        raise ConfigError("repeat_runs needs at least one seed")
    reports = [pipeline(int(s)) for s in seeds]
    summary: Dict[str, Dict[str, Any]] = {}
    for metric in reports[0].metrics():
        values = [r.metrics()[metric] for r in reports]
        defined = [v for v in values if v is not None]
        summary[metric] = {
            "values": values,
            "mean": float(np.mean(defined)) if defined else None,
            "std": float(np.std(defined)) if defined else None,
            "median": float(np.median(defined)) if defined else None,
        }
    return summary

