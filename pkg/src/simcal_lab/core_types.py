"""Shared domain types, class statistics and bin assignment."""

import json
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND = 0

INSTANCES = "instances"
IMAGES = "images"


class SimCalError(Exception):
    """Base class for every error raised by the lab."""


class UnknownClassError(SimCalError, KeyError):
    """A class id outside 1..C was used."""

    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown class"


class ConfigError(SimCalError, ValueError):
    """A configuration value is invalid or unknown."""


class ShapeError(SimCalError, ValueError):
    """Array shapes or vector lengths do not line up."""


class EmptyDatasetError(SimCalError, ValueError):
    """An operation needs at least one image."""


class NonFiniteError(SimCalError, ArithmeticError):
    """A NaN or infinity showed up in a computation."""


class DivergenceError(NonFiniteError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class DegeneratePredictionError(SimCalError, ValueError):
    """A prediction vector cannot be normalized."""


class MissingPredictionError(SimCalError, KeyError):
    """Evaluation proposals without a prediction."""

    def __init__(self, proposal_ids: Sequence[int]):
        ids = list(proposal_ids)
        shown = ", ".join(str(i) for i in ids[:20])
        more = f" (+{len(ids) - 20} more)" if len(ids) > 20 else ""
        super().__init__(f"missing predictions for proposals: {shown}{more}")
        self.proposal_ids = ids

    def __str__(self) -> str:
        return self.args[0]


class SchemeMismatchError(SimCalError, ValueError):
    """Two reports were produced under different bin schemes."""


@dataclass(frozen=True)
class ClassStats:
    """Per-class training-instance and training-image counts.

    Lists are indexed by ``class_id - 1``; class ids run over 1..C and 0 is
    background.
    """

    num_classes: int
    instance_counts: Tuple[int, ...]
    image_counts: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "instance_counts", tuple(int(c) for c in self.instance_counts))
        object.__setattr__(self, "image_counts", tuple(int(c) for c in self.image_counts))
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if len(self.instance_counts) != self.num_classes or len(self.image_counts) != self.num_classes:
            raise ConfigError(
                f"expected {self.num_classes} counts, got {len(self.instance_counts)} instance "
                f"and {len(self.image_counts)} image counts"
            )
        for j, (n_inst, n_img) in enumerate(zip(self.instance_counts, self.image_counts), 1):
            if n_inst < 0 or n_img < 0:
                raise ConfigError(f"class {j}: counts must be non-negative")
            if n_inst >= 1 and n_img < 1:
                raise ConfigError(f"class {j}: {n_inst} instances but no containing image")

    @classmethod
    def from_labels(
        cls, num_classes: int, image_instances: Sequence[Sequence[int]]
    ) -> "ClassStats":
        """Count instances and containing images from per-image class lists."""
        instances = np.zeros(num_classes + 1, dtype=np.int64)
        images = np.zeros(num_classes + 1, dtype=np.int64)
        for classes in image_instances:
            if len(classes) == 0:
                continue
            arr = np.asarray(classes, dtype=np.int64)
            np.add.at(instances, arr, 1)
            images[np.unique(arr)] += 1
        return cls(num_classes, tuple(instances[1:]), tuple(images[1:]))

    def check_class(self, class_id: int) -> None:
        if not isinstance(class_id, (int, np.integer)) or not 1 <= class_id <= self.num_classes:
            raise UnknownClassError(f"unknown class: {class_id!r}")

    def count(self, class_id: int, basis: str = INSTANCES) -> int:
        self.check_class(class_id)
        if basis == INSTANCES:
            return self.instance_counts[class_id - 1]
        if basis == IMAGES:
            return self.image_counts[class_id - 1]
        raise ConfigError(f"unknown bin basis: {basis!r}")

    def instance_array(self) -> np.ndarray:
        """Instance counts as a length C+1 array with a zero at index 0."""
        return np.concatenate([[0], np.asarray(self.instance_counts, dtype=np.int64)])

    def unseen_classes(self) -> List[int]:
        return [j for j, n in enumerate(self.instance_counts, 1) if n == 0]

    def to_dict(self) -> Dict[str, List[int]]:
        return {
            "instance_counts": list(self.instance_counts),
            "image_counts": list(self.image_counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClassStats":
        try:
            instance_counts = data["instance_counts"]
            image_counts = data["image_counts"]
        except KeyError as e:
            raise ConfigError(f"class stats missing field {e}") from e
        return cls(len(instance_counts), tuple(instance_counts), tuple(image_counts))

    @classmethod
    def from_json(cls, text: str) -> "ClassStats":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class BinScheme:
    """Count thresholds splitting classes into bins.

    Bin ``b`` holds counts in ``[edges[b-1], edges[b])``; the first bin starts
    at 0 and the last one is unbounded.
    """

    edges: Tuple[int, ...]
    basis: str = INSTANCES
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        if self.basis not in (INSTANCES, IMAGES):
            raise ConfigError(f"unknown bin basis: {self.basis!r}")
        if len(self.edges) == 0:
            raise ConfigError("a bin scheme needs at least one edge")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ConfigError(f"bin edges must be strictly increasing: {self.edges}")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
            if len(self.names) != self.num_bins:
                raise ConfigError(f"{self.num_bins} bins but {len(self.names)} names")

    @property
    def num_bins(self) -> int:
        return len(self.edges) + 1

    def bin_names(self) -> Tuple[str, ...]:
        if self.names is not None:
            return self.names
        return tuple(f"ap{b + 1}" for b in range(self.num_bins))

    def bin_of_count(self, count: int) -> int:
        return int(np.searchsorted(self.edges, count, side="right"))

    def to_dict(self) -> Dict[str, Any]:
        return {"edges": list(self.edges), "basis": self.basis, "names": list(self.bin_names())}


def lvis_instance_bins() -> BinScheme:
    """Instance-count bins [0,10), [10,100), [100,1000), [1000,inf)."""
    return BinScheme((10, 100, 1000), INSTANCES, ("ap1", "ap2", "ap3", "ap4"))


def lvis_image_sets() -> BinScheme:
    """Rare (1-10 images), common (11-100) and frequent (>100) sets."""
    return BinScheme((11, 101), IMAGES, ("ap_r", "ap_c", "ap_f"))


def assign_bin(class_id: int, stats: ClassStats, scheme: BinScheme) -> int:
    """Return the 0-based bin holding ``class_id`` under ``scheme``.

    Raises:
        UnknownClassError: if ``class_id`` is not in 1..C.
    """
    return scheme.bin_of_count(stats.count(class_id, scheme.basis))


def bin_members(stats: ClassStats, scheme: BinScheme) -> List[List[int]]:
    """Class ids per bin; the lists partition 1..C."""
    members: List[List[int]] = [[] for _ in range(scheme.num_bins)]
    for class_id in range(1, stats.num_classes + 1):
        members[assign_bin(class_id, stats, scheme)].append(class_id)
    return members


@dataclass(frozen=True)
class PredictionVector:
    """Per-proposal scores over C+1 classes, index 0 is background."""

    scores: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if len(self.scores) < 2:
            raise ShapeError("a prediction needs a background and at least one class score")
        if not all(np.isfinite(self.scores)):
            raise NonFiniteError("prediction scores must be finite")

    @property
    def num_classes(self) -> int:
        return len(self.scores) - 1

    def is_probability(self, tol: float = 1e-9) -> bool:
        arr = np.asarray(self.scores)
        return bool(np.all(arr >= 0.0) and np.all(arr <= 1.0) and abs(arr.sum() - 1.0) <= tol)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=np.float64)


@dataclass(frozen=True)
class ProposalRecord:
    """One candidate region: a frozen feature vector plus its matching info."""

    image_id: int
    features: Tuple[float, ...]
    iou_with_gt: float
    gt_class: Optional[int] = None
    assigned_label: int = BACKGROUND
    proposal_id: int = -1

    def __post_init__(self):
        if not 0.0 <= self.iou_with_gt <= 1.0:
            raise ConfigError(f"iou_with_gt must be in [0, 1], got {self.iou_with_gt}")
        if self.assigned_label < 0:
            raise ConfigError(f"assigned_label must be >= 0, got {self.assigned_label}")
        if self.assigned_label > 0 and self.gt_class != self.assigned_label:
            raise ConfigError(
                f"foreground label {self.assigned_label} does not match gt_class {self.gt_class}"
            )


def match_label(iou: float, gt_class: Optional[int], iou_threshold: float) -> int:
    """Label a proposal: its gt class when IoU >= threshold, else background."""
    if iou >= iou_threshold:
        if gt_class is None or gt_class == BACKGROUND:
            logger.warning("proposal with IoU %.3f has no ground-truth class; labelled background", iou)
            return BACKGROUND
        return int(gt_class)
    return BACKGROUND


def match_proposal(proposal: ProposalRecord, iou_threshold: float = 0.5) -> ProposalRecord:
    """Return ``proposal`` with ``assigned_label`` set by IoU matching."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    label = match_label(proposal.iou_with_gt, proposal.gt_class, iou_threshold)
    if label == proposal.assigned_label:
        return proposal
    return replace(proposal, assigned_label=label)


def match_labels(
    iou: np.ndarray, gt_class: np.ndarray, iou_threshold: float = 0.5
) -> np.ndarray:
    """Vectorized ``match_label``; ``gt_class`` uses 0 for "no instance"."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    iou = np.asarray(iou, dtype=np.float64)
    gt_class = np.asarray(gt_class, dtype=np.int64)
    hit = iou >= iou_threshold
    orphan = hit & (gt_class == BACKGROUND)
    if orphan.any():
        logger.warning(
            "%d proposals above IoU %.2f have no ground-truth class; labelled background",
            int(orphan.sum()),
            iou_threshold,
        )
    return np.where(hit, gt_class, BACKGROUND).astype(np.int64)
