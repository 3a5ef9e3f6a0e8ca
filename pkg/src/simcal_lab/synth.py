"""Synthetic long-tail proposal datasets and the COCO-LT subsampler."""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_types import (
    BACKGROUND,
    BinScheme,
    ClassStats,
    ConfigError,
    ProposalRecord,
    bin_members,
    lvis_image_sets,
    lvis_instance_bins,
    match_labels,
)
from .rng import substream

logger = logging.getLogger(__name__)

POWERLAW = "powerlaw"
EXPONENTIAL = "exponential"
EXPLICIT = "explicit"
FREQUENCY_LAWS = (POWERLAW, EXPONENTIAL, EXPLICIT)


def _check_range(name: str, value: Tuple[int, int], minimum: int = 0) -> Tuple[int, int]:
    lo, hi = (int(v) for v in value)
    if lo < minimum or hi < lo:
        raise ConfigError(f"{name} must be a non-empty range with low >= {minimum}, got {value}")
    return lo, hi


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic frozen-feature dataset.

    Class prototypes are drawn with coordinates ``N(0, 2*prototype_spread**2/d)``
    so two prototypes sit about ``2*prototype_spread`` apart. Instance proposals
    add per-coordinate Gaussian noise ``within_class_noise``; broad background
    proposals are centred at the origin with per-coordinate scale
    ``background_spread * within_class_noise``.
    """

    num_classes: int = 60
    feature_dim: int = 32
    frequency_law: str = POWERLAW
    law_param: Optional[float] = None
    head_tail_ratio: float = 1000.0
    explicit_counts: Optional[Tuple[int, ...]] = None
    max_instances_per_head_class: int = 8000
    instances_per_image: Tuple[int, int] = (1, 3)
    proposals_per_instance: Tuple[int, int] = (1, 4)
    background_proposals_per_image: Tuple[int, int] = (2, 8)
    prototype_spread: float = 1.0
    within_class_noise: float = 0.5
    background_spread: float = 1.5
    iou_beta_a: float = 5.0
    iou_beta_b: float = 2.0
    background_iou_max: float = 0.3
    iou_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.frequency_law not in FREQUENCY_LAWS:
            raise ConfigError(f"unknown frequency_law {self.frequency_law!r}")
        if self.frequency_law == EXPLICIT:
            if self.explicit_counts is None or len(self.explicit_counts) != self.num_classes:
                raise ConfigError("explicit law needs one count per class")
            object.__setattr__(self, "explicit_counts", tuple(int(c) for c in self.explicit_counts))
            if min(self.explicit_counts) < 0:
                raise ConfigError("explicit counts must be non-negative")
        elif self.explicit_counts is not None:
            object.__setattr__(self, "explicit_counts", tuple(int(c) for c in self.explicit_counts))
        if self.max_instances_per_head_class < 1:
            raise ConfigError("max_instances_per_head_class must be positive")
        if self.head_tail_ratio < 1.0:
            raise ConfigError("head_tail_ratio must be >= 1")
        if self.within_class_noise <= 0:
            raise ConfigError("within_class_noise must be > 0")
        if self.prototype_spread <= 0 or self.background_spread <= 0:
            raise ConfigError("prototype_spread and background_spread must be > 0")
        if self.iou_beta_a <= 0 or self.iou_beta_b <= 0:
            raise ConfigError("IoU Beta parameters must be > 0")
        if not 0.0 < self.background_iou_max <= 1.0:
            raise ConfigError("background_iou_max must be in (0, 1]")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError("iou_threshold must be in (0, 1)")
        object.__setattr__(self, "instances_per_image", _check_range("instances_per_image", self.instances_per_image, 1))
        object.__setattr__(
            self, "proposals_per_instance", _check_range("proposals_per_instance", self.proposals_per_instance, 1)
        )
        object.__setattr__(
            self,
            "background_proposals_per_image",
            _check_range("background_proposals_per_image", self.background_proposals_per_image, 0),
        )

    def resolved_law_param(self) -> float:
        """Decay parameter of the law; derived from head_tail_ratio when unset."""
        if self.law_param is not None:
            return float(self.law_param)
        if self.frequency_law == POWERLAW:
            return math.log(self.head_tail_ratio) / math.log(self.num_classes)
        if self.frequency_law == EXPONENTIAL:
            return math.log(self.head_tail_ratio) / (self.num_classes - 1)
        return 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthConfig":
        kwargs = dict(data)
        for key in ("instances_per_image", "proposals_per_instance", "background_proposals_per_image"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("explicit_counts") is not None:
            kwargs["explicit_counts"] = tuple(kwargs["explicit_counts"])
        return cls(**kwargs)


def law_counts(config: SynthConfig) -> np.ndarray:
    """Per-class instance counts of the configured frequency law (class 1 first)."""
    if config.frequency_law == EXPLICIT:
        return np.asarray(config.explicit_counts, dtype=np.int64)
    j = np.arange(1, config.num_classes + 1, dtype=np.float64)
    param = config.resolved_law_param()
    if config.frequency_law == POWERLAW:
        raw = config.max_instances_per_head_class * j ** (-param)
    else:
        raw = config.max_instances_per_head_class * np.exp(-param * (j - 1))
    # guard against 1999.9999 style rounding before the floor
    return np.floor(raw + 1e-9).astype(np.int64)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    instances: Tuple[int, ...]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SynthDataset:
    """Images with instances and IoU-annotated proposals over fixed features.

    Proposal arrays are parallel and read-only. ``proposal_image`` and
    ``instance_image`` hold image positions (indices into ``images``);
    ``gt_class`` uses 0 for "no instance" and ``proposal_instance`` uses -1.
    """

    config: SynthConfig
    split: str
    stats: ClassStats
    prototypes: np.ndarray
    images: Tuple[ImageRecord, ...]
    instance_class: np.ndarray
    instance_image: np.ndarray
    proposal_ids: np.ndarray
    proposal_image: np.ndarray
    proposal_instance: np.ndarray
    features: np.ndarray
    iou: np.ndarray
    gt_class: np.ndarray
    labels: np.ndarray
    notes: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in (
            "prototypes",
            "instance_class",
            "instance_image",
            "proposal_ids",
            "proposal_image",
            "proposal_instance",
            "features",
            "iou",
            "gt_class",
            "labels",
        ):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def num_classes(self) -> int:
        return self.stats.num_classes

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def num_proposals(self) -> int:
        return len(self.proposal_ids)

    @cached_property
    def image_proposals(self) -> List[np.ndarray]:
        """Proposal indices per image position."""
        order = np.argsort(self.proposal_image, kind="stable")
        bounds = np.searchsorted(self.proposal_image[order], np.arange(self.num_images + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.num_images)]

    @cached_property
    def class_images(self) -> Dict[int, np.ndarray]:
        """Image positions containing each class (classes without images omitted)."""
        result: Dict[int, List[int]] = {}
        for pos, image in enumerate(self.images):
            for class_id in set(image.instances):
                result.setdefault(class_id, []).append(pos)
        return {c: np.asarray(v, dtype=np.int64) for c, v in sorted(result.items())}

    def proposal(self, index: int) -> ProposalRecord:
        gt = int(self.gt_class[index])
        return ProposalRecord(
            image_id=self.images[int(self.proposal_image[index])].id,
            features=tuple(float(x) for x in self.features[index]),
            iou_with_gt=float(self.iou[index]),
            gt_class=gt if gt != BACKGROUND else None,
            assigned_label=int(self.labels[index]),
            proposal_id=int(self.proposal_ids[index]),
        )

    def consistency_problems(self) -> List[str]:
        """Violations of the dataset invariants; empty when consistent."""
        problems = []
        recomputed = ClassStats.from_labels(self.num_classes, [im.instances for im in self.images])
        if recomputed != self.stats:
            problems.append("stored stats differ from stats recomputed from images")
        if self.num_proposals and (self.proposal_image.min() < 0 or self.proposal_image.max() >= self.num_images):
            problems.append("proposal refers to a missing image")
        fg = np.nonzero(self.labels > 0)[0]
        for index in fg:
            image = self.images[int(self.proposal_image[index])]
            if int(self.gt_class[index]) not in image.instances:
                problems.append(f"proposal {int(self.proposal_ids[index])}: gt_class not in its image")
                break
        if np.any((self.labels > 0) & (self.labels != self.gt_class)):
            problems.append("foreground label differs from gt_class")
        if len(np.unique(self.proposal_ids)) != self.num_proposals:
            problems.append("duplicate proposal ids")
        return problems

    def fingerprint(self) -> str:
        return hashlib.sha256(dataset_to_json(self).encode("utf-8")).hexdigest()


def _prototypes(config: SynthConfig) -> np.ndarray:
    rng = substream(config.seed, "prototypes")
    scale = config.prototype_spread * math.sqrt(2.0 / config.feature_dim)
    return rng.normal(0.0, scale, size=(config.num_classes, config.feature_dim))


def _build(
    config: SynthConfig, counts: np.ndarray, prototypes: np.ndarray, rng: np.random.Generator, split: str
) -> SynthDataset:
    C, d = config.num_classes, config.feature_dim
    classes = np.repeat(np.arange(1, C + 1, dtype=np.int64), counts)
    rng.shuffle(classes)

    # partition the shuffled instances into images
    sizes = []
    remaining = len(classes)
    lo, hi = config.instances_per_image
    while remaining > 0:
        size = min(int(rng.integers(lo, hi + 1)), remaining)
        sizes.append(size)
        remaining -= size
    instance_image = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    images = tuple(
        ImageRecord(i, tuple(int(c) for c in classes[bounds[i] : bounds[i + 1]])) for i in range(len(sizes))
    )

    # proposals spawned by instances
    lo, hi = config.proposals_per_instance
    per_instance = rng.integers(lo, hi + 1, size=len(classes))
    inst_of_prop = np.repeat(np.arange(len(classes), dtype=np.int64), per_instance)
    fg_class = classes[inst_of_prop]
    fg_features = prototypes[fg_class - 1] + rng.normal(0.0, config.within_class_noise, size=(len(inst_of_prop), d))
    fg_iou = rng.beta(config.iou_beta_a, config.iou_beta_b, size=len(inst_of_prop))

    # broad background proposals
    lo, hi = config.background_proposals_per_image
    per_image = rng.integers(lo, hi + 1, size=len(images))
    bg_image = np.repeat(np.arange(len(images), dtype=np.int64), per_image)
    bg_scale = config.background_spread * config.within_class_noise
    bg_features = rng.normal(0.0, bg_scale, size=(len(bg_image), d))
    bg_iou = rng.uniform(0.0, config.background_iou_max, size=len(bg_image))

    proposal_image = np.concatenate([instance_image[inst_of_prop], bg_image])
    order = np.argsort(proposal_image, kind="stable")
    gt_class = np.concatenate([fg_class, np.zeros(len(bg_image), dtype=np.int64)])[order]
    iou = np.concatenate([fg_iou, bg_iou])[order]
    dataset = SynthDataset(
        config=config,
        split=split,
        stats=ClassStats.from_labels(C, [im.instances for im in images]),
        prototypes=prototypes,
        images=images,
        instance_class=classes,
        instance_image=instance_image,
        proposal_ids=np.arange(len(order), dtype=np.int64),
        proposal_image=proposal_image[order],
        proposal_instance=np.concatenate([inst_of_prop, np.full(len(bg_image), -1, dtype=np.int64)])[order],
        features=np.concatenate([fg_features, bg_features])[order],
        iou=iou,
        gt_class=gt_class,
        labels=match_labels(iou, gt_class, config.iou_threshold),
    )
    unseen = dataset.stats.unseen_classes()
    if unseen:
        dataset.notes["zero_instance_classes"] = unseen
        logger.warning("%d classes have no %s instances: %s", len(unseen), split, unseen[:10])
    logger.info(
        "generated %s split: %d images, %d instances, %d proposals",
        split,
        dataset.num_images,
        len(classes),
        dataset.num_proposals,
    )
    return dataset


def generate(config: SynthConfig) -> SynthDataset:
    """Generate the training split; a pure function of ``config``."""
    return _build(config, law_counts(config), _prototypes(config), substream(config.seed, "train"), "train")


def generate_eval(config: SynthConfig, instances_per_class: int = 20) -> SynthDataset:
    """Generate a balanced evaluation split sharing the training prototypes."""
    if instances_per_class < 1:
        raise ConfigError("instances_per_class must be positive")
    counts = np.full(config.num_classes, instances_per_class, dtype=np.int64)
    return _build(config, counts, _prototypes(config), substream(config.seed, "eval"), "eval")


def _subset_groups(num_classes: int, num_subsets: int) -> List[np.ndarray]:
    if num_classes % num_subsets:
        logger.warning(
            "%d classes do not split evenly into %d subsets; earlier subsets get one extra class",
            num_classes,
            num_subsets,
        )
    return np.array_split(np.arange(1, num_classes + 1), num_subsets)


def coco_lt_interval(subset: int, scale: float) -> Tuple[float, float]:
    """Open interval of the kept-instance target for 1-based ``subset`` > 1."""
    return 8.0 * 10 ** (4 - subset) * scale, 8.0 * 10 ** (5 - subset) * scale


def subsample_coco_lt(
    dataset: SynthDataset, num_subsets: int = 4, seed: int = 0, scale: Optional[float] = None
) -> SynthDataset:
    """Thin index-contiguous class subsets to exponentially decaying totals.

    Subset 1 is untouched. For subset ``i > 1`` a target ``n_i`` is drawn
    uniformly from ``coco_lt_interval(i, scale)`` and ``min(n_i, available)``
    of its instances are kept. Dropped instances take their proposals with
    them and images left without instances are removed.

    Args:
        dataset: training split to thin.
        num_subsets: number of index-contiguous class groups.
        seed: seed of the selection stream.
        scale: interval multiplier; defaults to max class count / 8e4.
    """
    if num_subsets < 1:
        raise ConfigError("num_subsets must be positive")
    rng = substream(seed, "coco_lt")
    counts = np.asarray(dataset.stats.instance_counts)
    if scale is None:
        scale = max(int(counts.max()), 1) / 8e4
    keep = np.ones(len(dataset.instance_class), dtype=bool)
    report = []
    for i, group in enumerate(_subset_groups(dataset.num_classes, num_subsets), 1):
        members = np.nonzero(np.isin(dataset.instance_class, group))[0]
        entry: Dict[str, Any] = {"subset": i, "classes": [int(group[0]), int(group[-1])], "available": len(members)}
        if i == 1:
            entry.update(target=None, interval=None, kept=len(members))
            report.append(entry)
            continue
        low, high = coco_lt_interval(i, scale)
        first, last = math.floor(low) + 1, math.ceil(high) - 1
        if first > last:
            target = first
            logger.warning("subset %d interval (%.3g, %.3g) holds no integer; using %d", i, low, high, target)
        else:
            target = int(rng.integers(first, last + 1))
        kept = min(target, len(members))
        if kept < target:
            logger.warning("subset %d: target %d exceeds %d available instances", i, target, len(members))
        chosen = rng.choice(members, size=kept, replace=False) if kept else np.empty(0, dtype=np.int64)
        keep[members] = False
        keep[chosen] = True
        entry.update(target=target, interval=[low, high], kept=int(kept))
        report.append(entry)
    result = _filter_instances(dataset, keep)
    result.notes["coco_lt"] = {"scale": scale, "seed": seed, "subsets": report}
    return result


def _filter_instances(dataset: SynthDataset, keep: np.ndarray) -> SynthDataset:
    """Drop unkept instances, their proposals and images left empty."""
    kept_images = np.unique(dataset.instance_image[keep])
    image_map = np.full(dataset.num_images, -1, dtype=np.int64)
    image_map[kept_images] = np.arange(len(kept_images))
    instance_map = np.full(len(keep), -1, dtype=np.int64)
    instance_map[keep] = np.arange(int(keep.sum()))

    own = dataset.proposal_instance
    prop_keep = np.where(own >= 0, keep[np.maximum(own, 0)], True) & (image_map[dataset.proposal_image] >= 0)

    instance_class = dataset.instance_class[keep]
    instance_image = image_map[dataset.instance_image[keep]]
    images = []
    for new_pos, old_pos in enumerate(kept_images):
        classes = instance_class[instance_image == new_pos]
        images.append(ImageRecord(dataset.images[int(old_pos)].id, tuple(int(c) for c in classes)))
    proposal_instance = np.where(own[prop_keep] >= 0, instance_map[np.maximum(own[prop_keep], 0)], -1)
    result = SynthDataset(
        config=dataset.config,
        split=dataset.split,
        stats=ClassStats.from_labels(dataset.num_classes, [im.instances for im in images]),
        prototypes=dataset.prototypes,
        images=tuple(images),
        instance_class=instance_class,
        instance_image=instance_image,
        proposal_ids=dataset.proposal_ids[prop_keep],
        proposal_image=image_map[dataset.proposal_image[prop_keep]],
        proposal_instance=proposal_instance,
        features=dataset.features[prop_keep],
        iou=dataset.iou[prop_keep],
        gt_class=dataset.gt_class[prop_keep],
        labels=dataset.labels[prop_keep],
        notes={k: v for k, v in dataset.notes.items() if k != "zero_instance_classes"},
    )
    unseen = result.stats.unseen_classes()
    if unseen:
        result.notes["zero_instance_classes"] = unseen
    return result


def summarize(
    dataset: Optional[SynthDataset],
    instance_bins: Optional[BinScheme] = None,
    image_sets: Optional[BinScheme] = None,
) -> Dict[str, Any]:
    """Counts, bin populations and the sorted-count curve of a dataset."""
    if dataset is None or dataset.num_images == 0:
        return {}
    instance_bins = instance_bins or lvis_instance_bins()
    image_sets = image_sets or lvis_image_sets()
    stats = dataset.stats
    summary: Dict[str, Any] = {
        "split": dataset.split,
        "num_classes": stats.num_classes,
        "num_images": dataset.num_images,
        "num_instances": int(sum(stats.instance_counts)),
        "num_proposals": dataset.num_proposals,
        "foreground_proposals": int((dataset.labels > 0).sum()),
        "background_proposals": int((dataset.labels == 0).sum()),
        "instance_counts": list(stats.instance_counts),
        "image_counts": list(stats.image_counts),
        "sorted_counts": sorted(stats.instance_counts, reverse=True),
        "instance_bins": {
            name: len(members)
            for name, members in zip(instance_bins.bin_names(), bin_members(stats, instance_bins))
        },
        "image_sets": {
            name: len(members) for name, members in zip(image_sets.bin_names(), bin_members(stats, image_sets))
        },
        "zero_instance_classes": stats.unseen_classes(),
    }
    coco_lt = dataset.notes.get("coco_lt")
    if coco_lt:
        totals = []
        for entry in coco_lt["subsets"]:
            lo, hi = entry["classes"]
            total = int(sum(stats.instance_counts[lo - 1 : hi]))
            inside = entry["interval"] is None or entry["interval"][0] < total < entry["interval"][1]
            totals.append({**entry, "total": total, "inside_interval": inside})
        summary["coco_lt_subsets"] = totals
    return summary


def dataset_to_dict(dataset: SynthDataset) -> Dict[str, Any]:
    images = [im.id for im in dataset.images]
    return {
        "config": dataset.config.to_dict(),
        "split": dataset.split,
        "stats": dataset.stats.to_dict(),
        "prototypes": dataset.prototypes.tolist(),
        "images": [{"id": im.id, "instances": list(im.instances)} for im in dataset.images],
        "proposals": [
            {
                "id": int(pid),
                "image_id": images[int(pos)],
                "features": feats,
                "iou": float(iou),
                "gt_class": int(gt) if gt != BACKGROUND else None,
                "instance": int(inst) if inst >= 0 else None,
            }
            for pid, pos, feats, iou, gt, inst in zip(
                dataset.proposal_ids,
                dataset.proposal_image,
                dataset.features.tolist(),
                dataset.iou,
                dataset.gt_class,
                dataset.proposal_instance,
            )
        ],
        "notes": dataset.notes,
    }


def dataset_to_json(dataset: SynthDataset) -> str:
    return json.dumps(dataset_to_dict(dataset), separators=(",", ":"))


def dataset_from_dict(data: Dict[str, Any]) -> SynthDataset:
    config = SynthConfig.from_dict(data["config"])
    images = tuple(ImageRecord(int(im["id"]), tuple(int(c) for c in im["instances"])) for im in data["images"])
    position = {im.id: pos for pos, im in enumerate(images)}
    instance_class = np.asarray([c for im in images for c in im.instances], dtype=np.int64)
    instance_image = np.asarray([pos for pos, im in enumerate(images) for _ in im.instances], dtype=np.int64)
    props = data["proposals"]
    d = config.feature_dim
    gt_class = np.asarray([p["gt_class"] or BACKGROUND for p in props], dtype=np.int64)
    iou = np.asarray([p["iou"] for p in props], dtype=np.float64)
    stats = ClassStats.from_dict(data["stats"])
    dataset = SynthDataset(
        config=config,
        split=data.get("split", "train"),
        stats=stats,
        prototypes=np.asarray(data["prototypes"], dtype=np.float64).reshape(config.num_classes, d),
        images=images,
        instance_class=instance_class,
        instance_image=instance_image,
        proposal_ids=np.asarray([p["id"] for p in props], dtype=np.int64),
        proposal_image=np.asarray([position[p["image_id"]] for p in props], dtype=np.int64),
        proposal_instance=np.asarray(
            [-1 if p.get("instance") is None else p["instance"] for p in props], dtype=np.int64
        ),
        features=np.asarray([p["features"] for p in props], dtype=np.float64).reshape(len(props), d),
        iou=iou,
        gt_class=gt_class,
        labels=match_labels(iou, gt_class, config.iou_threshold),
        notes=data.get("notes", {}),
    )
    problems = dataset.consistency_problems()
    if problems:
        raise ConfigError("inconsistent dataset file: " + "; ".join(problems))
    return dataset


def save_dataset(dataset: SynthDataset, path: str) -> str:
    """Write the dataset JSON and return its SHA-256."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = dataset_to_json(dataset)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_dataset(path: str) -> SynthDataset:
    with open(path, "r", encoding="utf-8") as f:
        return dataset_from_dict(json.load(f))


def per_subset_totals(dataset: SynthDataset, num_subsets: int = 4) -> List[int]:
    counts = dataset.stats.instance_counts
    return [int(sum(counts[g[0] - 1 : g[-1]])) for g in _subset_groups(dataset.num_classes, num_subsets)]


def explicit_config(counts: Sequence[int], **overrides: Any) -> SynthConfig:
    """Shortcut for a config with explicit per-class counts."""
    return SynthConfig(
        num_classes=len(counts),
        frequency_law=EXPLICIT,
        explicit_counts=tuple(int(c) for c in counts),
        **overrides,
    )
