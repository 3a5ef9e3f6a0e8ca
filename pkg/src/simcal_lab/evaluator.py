"""Per-class average precision aggregated into instance bins and image sets."""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core_types import (
    BACKGROUND,
    BinScheme,
    ClassStats,
    MissingPredictionError,
    SchemeMismatchError,
    ShapeError,
    assign_bin,
    lvis_image_sets,
    lvis_instance_bins,
)
from .synth import SynthDataset

logger = logging.getLogger(__name__)

Predictions = Union[np.ndarray, Mapping[int, Sequence[float]]]


def ap_from_ranking(
    scores: np.ndarray, positives: np.ndarray, proposal_ids: Optional[np.ndarray] = None
) -> Optional[float]:
    """All-point interpolated AP of one score column.

    Proposals are ranked by score descending, ties by ascending id. Returns
    ``None`` when there is no positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    num_pos = int(positives.sum())
    if num_pos == 0:
        return None
    ids = np.arange(len(scores)) if proposal_ids is None else np.asarray(proposal_ids)
    order = np.lexsort((ids, -scores))
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits].sum() / num_pos)


def per_class_ap(
    predictions: np.ndarray,
    labels: np.ndarray,
    class_id: int,
    proposal_ids: Optional[np.ndarray] = None,
) -> Optional[float]:
    """AP of ``class_id`` over (n, C+1) predictions and assigned labels."""
    predictions = np.asarray(predictions)
    return ap_from_ranking(predictions[:, class_id], np.asarray(labels) == class_id, proposal_ids)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


@dataclass
class EvalReport:
    """Per-class AP plus bin, set and overall means.

    ``per_class_ap`` holds every class with at least one positive proposal;
    classes without training instances are listed in ``unseen_classes`` and
    left out of every mean.
    """

    per_class_ap: Dict[int, float]
    bin_scheme: BinScheme
    set_scheme: BinScheme
    ap_bins: List[Optional[float]]
    bin_counts: List[int]
    ap_sets: List[Optional[float]]
    set_counts: List[int]
    overall_ap: Optional[float]
    evaluable_count: int
    unseen_classes: List[int] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def unseen_count(self) -> int:
        return len(self.unseen_classes)

    def metrics(self) -> Dict[str, Optional[float]]:
        """Flat ``name -> AP`` view: bins, sets and ``ap``."""
        result: Dict[str, Optional[float]] = {}
        result.update(zip(self.bin_scheme.bin_names(), self.ap_bins))
        result.update(zip(self.set_scheme.bin_names(), self.ap_sets))
        result["ap"] = self.overall_ap
        return result

    def bin_ap(self, index: int) -> Optional[float]:
        return self.ap_bins[index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
            "bin_scheme": self.bin_scheme.to_dict(),
            "set_scheme": self.set_scheme.to_dict(),
            "ap_bins": self.ap_bins,
            "bin_counts": self.bin_counts,
            "ap_sets": self.ap_sets,
            "set_counts": self.set_counts,
            "overall_ap": self.overall_ap,
            "evaluable_count": self.evaluable_count,
            "unseen_classes": self.unseen_classes,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        def scheme(raw: Dict[str, Any]) -> BinScheme:
            return BinScheme(tuple(raw["edges"]), raw["basis"], tuple(raw["names"]))

        return cls(
            per_class_ap={int(c): float(ap) for c, ap in data["per_class_ap"].items()},
            bin_scheme=scheme(data["bin_scheme"]),
            set_scheme=scheme(data["set_scheme"]),
            ap_bins=list(data["ap_bins"]),
            bin_counts=list(data["bin_counts"]),
            ap_sets=list(data["ap_sets"]),
            set_counts=list(data["set_counts"]),
            overall_ap=data["overall_ap"],
            evaluable_count=int(data["evaluable_count"]),
            unseen_classes=list(data.get("unseen_classes", [])),
            metadata=dict(data.get("metadata", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _align_predictions(predictions: Predictions, dataset: SynthDataset) -> np.ndarray:
    ids = dataset.proposal_ids
    if isinstance(predictions, Mapping):
        missing = [int(i) for i in ids if int(i) not in predictions]
        if missing:
            raise MissingPredictionError(missing)
        if len(ids) == 0:
            return np.empty((0, dataset.num_classes + 1))
        return np.asarray([predictions[int(i)] for i in ids], dtype=np.float64)
    scores = np.asarray(predictions, dtype=np.float64)
    if len(ids) == 0 and len(scores) == 0:
        return np.empty((0, dataset.num_classes + 1))
    if scores.ndim != 2:
        raise ShapeError(f"predictions must be a (n, C+1) array, got shape {scores.shape}")
    if len(scores) < len(ids):
        raise MissingPredictionError([int(i) for i in ids[len(scores) :]])
    if len(scores) > len(ids):
        raise ShapeError(f"{len(scores)} prediction rows for {len(ids)} proposals")
    return scores


def evaluate(
    predictions: Predictions,
    dataset: SynthDataset,
    bin_scheme: Optional[BinScheme] = None,
    train_stats: Optional[ClassStats] = None,
    set_scheme: Optional[BinScheme] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """Score ``predictions`` on ``dataset`` and aggregate by training counts.

    Args:
        predictions: (n, C+1) scores aligned with ``dataset.proposal_ids``, or
            a mapping from proposal id to scores.
        dataset: labelled evaluation split.
        bin_scheme: instance-count bins, LVIS-style by default.
        train_stats: counts deciding bin membership; the dataset's own counts
            when omitted.
        set_scheme: image-count sets, rare/common/frequent by default.

    Raises:
        MissingPredictionError: when proposals have no prediction.
    """
    bin_scheme = bin_scheme or lvis_instance_bins()
    set_scheme = set_scheme or lvis_image_sets()
    stats = train_stats if train_stats is not None else dataset.stats
    scores = _align_predictions(predictions, dataset)
    if len(scores) and scores.shape[1] != stats.num_classes + 1:
        raise ShapeError(f"predictions have {scores.shape[1]} columns, expected {stats.num_classes + 1}")

    labels = dataset.labels
    per_class: Dict[int, float] = {}
    for class_id in range(1, stats.num_classes + 1):
        if len(scores) == 0:
            break
        ap = per_class_ap(scores, labels, class_id, dataset.proposal_ids)
        if ap is not None:
            per_class[class_id] = ap

    unseen = [c for c in stats.unseen_classes() if c in per_class]
    evaluable = {c: ap for c, ap in per_class.items() if stats.count(c) > 0}

    def aggregate(scheme: BinScheme) -> Tuple[List[Optional[float]], List[int]]:
        groups: List[List[float]] = [[] for _ in range(scheme.num_bins)]
        for class_id, ap in evaluable.items():
            groups[assign_bin(class_id, stats, scheme)].append(ap)
        return [_mean(g) for g in groups], [len(g) for g in groups]

    ap_bins, bin_counts = aggregate(bin_scheme)
    ap_sets, set_counts = aggregate(set_scheme)
    if not evaluable:
        logger.warning("no evaluable class: every class lacks positives or training instances")
    return EvalReport(
        per_class_ap=per_class,
        bin_scheme=bin_scheme,
        set_scheme=set_scheme,
        ap_bins=ap_bins,
        bin_counts=bin_counts,
        ap_sets=ap_sets,
        set_counts=set_counts,
        overall_ap=_mean(list(evaluable.values())),
        evaluable_count=len(evaluable),
        unseen_classes=unseen,
        metadata=dict(metadata or {}),
    )


def oracle_predictions(dataset: SynthDataset) -> np.ndarray:
    """One-hot scores on every proposal's assigned label."""
    scores = np.zeros((dataset.num_proposals, dataset.num_classes + 1))
    scores[np.arange(dataset.num_proposals), dataset.labels] = 1.0
    return scores


def accuracy_by_bin(
    predictions: np.ndarray,
    dataset: SynthDataset,
    bin_scheme: Optional[BinScheme] = None,
    train_stats: Optional[ClassStats] = None,
) -> List[Optional[float]]:
    """Top-1 accuracy of foreground proposals grouped by their label's bin."""
    bin_scheme = bin_scheme or lvis_instance_bins()
    stats = train_stats if train_stats is not None else dataset.stats
    scores = _align_predictions(predictions, dataset)
    labels = dataset.labels
    fg = labels != BACKGROUND
    if not fg.any():
        return [None] * bin_scheme.num_bins
    correct = np.argmax(scores[fg], axis=1) == labels[fg]
    label_bins = np.asarray([assign_bin(int(c), stats, bin_scheme) for c in labels[fg]])
    return [
        float(correct[label_bins == b].mean()) if np.any(label_bins == b) else None
        for b in range(bin_scheme.num_bins)
    ]


@dataclass
class Comparison:
    """Signed deltas ``b - a`` and ordering verdicts between two reports."""

    names: Tuple[str, str]
    deltas: Dict[str, Optional[float]]
    values_a: Dict[str, Optional[float]]
    values_b: Dict[str, Optional[float]]
    verdicts: Dict[str, bool]

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"metric": m, self.names[0]: self.values_a[m], self.names[1]: self.values_b[m], "delta": d}
            for m, d in self.deltas.items()
        ]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=["metric", self.names[0], self.names[1], "delta"], lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: _cell(v) for k, v in row.items()})
        return out.getvalue()

    def render(self) -> str:
        width = max(len(m) for m in self.deltas) if self.deltas else 6
        lines = [f"{'metric':<{width}}  {self.names[0]:>10}  {self.names[1]:>10}  {'delta':>8}"]
        for m, d in self.deltas.items():
            lines.append(
                f"{m:<{width}}  {_pct(self.values_a[m]):>10}  {_pct(self.values_b[m]):>10}  {_pct(d, signed=True):>8}"
            )
        lines.append("")
        lines.extend(f"{name}: {'yes' if ok else 'no'}" for name, ok in self.verdicts.items())
        return "\n".join(lines)


def _pct(value: Optional[float], signed: bool = False) -> str:
    if value is None:
        return "-"
    return f"{100 * value:+.1f}" if signed else f"{100 * value:.1f}"


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else value


def compare(
    report_a: EvalReport,
    report_b: EvalReport,
    names: Tuple[str, str] = ("a", "b"),
    head_tolerance: float = 0.0,
) -> Comparison:
    """Compare two reports on the same schemes.

    Verdicts: ``tail_improved`` (first bin up), ``head_preserved`` (last bin
    down by at most ``head_tolerance``), ``overall_improved``.

    Raises:
        SchemeMismatchError: if the reports use different bins or sets.
    """
    if (report_a.bin_scheme.to_dict(), report_a.set_scheme.to_dict()) != (
        report_b.bin_scheme.to_dict(),
        report_b.set_scheme.to_dict(),
    ):
        raise SchemeMismatchError("reports were produced under different bin schemes")
    a, b = report_a.metrics(), report_b.metrics()
    deltas = {m: (None if a[m] is None or b[m] is None else b[m] - a[m]) for m in a}
    bins = report_a.bin_scheme.bin_names()

    def holds(metric: str, test) -> bool:
        return deltas[metric] is not None and bool(test(deltas[metric]))

    verdicts = {
        "tail_improved": holds(bins[0], lambda d: d > 0),
        "head_preserved": holds(bins[-1], lambda d: d >= -head_tolerance),
        "overall_improved": holds("ap", lambda d: d > 0),
    }
    return Comparison(names, deltas, a, b, verdicts)


def dominates(report_a: EvalReport, report_b: EvalReport) -> bool:
    """True if ``report_a`` is at least ``report_b`` on every defined metric."""
    a, b = report_a.metrics(), report_b.metrics()
    return all(a[m] is None or b[m] is None or a[m] >= b[m] for m in a)


def report_row(report: EvalReport, prefix: str = "", **metadata: Any) -> Dict[str, Any]:
    """Fixed-column CSV row: bin, set and overall APs plus run metadata."""
    row = {f"{prefix}{m}": _cell(v) for m, v in report.metrics().items()}
    row.update({k: _cell(v) for k, v in metadata.items()})
    return row


def write_rows(path: str, columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


def save_report(report: EvalReport, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json())


def load_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.from_json(f.read())
