"""Batch construction: random image epochs, repeat-factor epochs, bi-level batches."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as scipy_stats

from .core_types import BACKGROUND, ConfigError, EmptyDatasetError
from .synth import SynthDataset

logger = logging.getLogger(__name__)

_reported: set = set()


def _warn_once(key: Any, message: str, *args: Any, reported: Optional[set] = _reported) -> None:
    """Warn the first time ``key`` is seen in ``reported``, debug afterwards."""
    if reported is not None and key in reported:
        logger.debug(message, *args)
        return
    if reported is not None:
        reported.add(key)
    logger.warning(message, *args)


@dataclass(frozen=True)
class SamplerConfig:
    """Batch composition for every sampling regime.

    ``classes_per_batch`` is the number of classes drawn per calibration batch;
    it is unrelated to the re-weighting numerator of ``LossConfig``.
    With ``with_replacement`` a class can be drawn twice in one batch and then
    contributes its proposal group once per draw. When the drawn images hold
    fewer background proposals than ``fg_bg_ratio`` asks for, background is
    topped up by drawing with replacement.
    """

    classes_per_batch: int = 16
    images_per_class: int = 1
    fg_bg_ratio: Tuple[int, int] = (1, 1)
    repeat_threshold: float = 0.001
    repeat_exponent: float = 0.5
    random_batch_images: int = 8
    with_replacement: bool = False
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fg_bg_ratio", tuple(int(v) for v in self.fg_bg_ratio))
        if self.classes_per_batch < 1 or self.images_per_class < 1 or self.random_batch_images < 1:
            raise ConfigError("batch sizes must be positive")
        if len(self.fg_bg_ratio) != 2 or min(self.fg_bg_ratio) < 1:
            raise ConfigError(f"fg_bg_ratio must be two positive parts, got {self.fg_bg_ratio}")
        if not 0.0 < self.repeat_threshold < 1.0:
            raise ConfigError(f"repeat_threshold must be in (0, 1), got {self.repeat_threshold}")
        if self.repeat_exponent <= 0:
            raise ConfigError("repeat_exponent must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


def random_image_batches(
    dataset: SynthDataset, batch_images: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Endless stream of image-position batches, one uniform shuffle per epoch.

    Raises:
        EmptyDatasetError: if the dataset has no images.
    """
    if dataset.num_images == 0:
        raise EmptyDatasetError("cannot sample batches from a dataset without images")
    if batch_images < 1:
        raise ConfigError("batch_images must be positive")
    return _epoch_batches(lambda: rng.permutation(dataset.num_images), batch_images)


def _epoch_batches(make_epoch, batch_images: int) -> Iterator[np.ndarray]:
    while True:
        order = make_epoch()
        for start in range(0, len(order), batch_images):
            yield order[start : start + batch_images]


def repeat_factor(frequency: float, threshold: float, exponent: float = 0.5) -> float:
    """Per-category repeat factor ``max(1, (t / f) ** exponent)``.

    Args:
        frequency: fraction of training images containing the category, in (0, 1].
        threshold: repeat threshold ``t`` in (0, 1).
        exponent: 0.5 gives the square-root rule.
    """
    if not 0.0 < frequency <= 1.0:
        raise ConfigError(f"frequency must be in (0, 1], got {frequency}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    return max(1.0, (threshold / frequency) ** exponent)


def category_frequencies(dataset: SynthDataset) -> np.ndarray:
    """Fraction of images containing each class; index 0 unused."""
    if dataset.num_images == 0:
        raise EmptyDatasetError("category frequencies need at least one image")
    counts = np.concatenate([[0], np.asarray(dataset.stats.image_counts, dtype=np.float64)])
    return counts / dataset.num_images


def category_repeat_factors(
    dataset: SynthDataset, threshold: float, exponent: float = 0.5
) -> Dict[int, float]:
    """Repeat factor of every class that appears in at least one image."""
    freqs = category_frequencies(dataset)
    return {c: repeat_factor(float(freqs[c]), threshold, exponent) for c in range(1, len(freqs)) if freqs[c] > 0}


def image_repeat_factors(dataset: SynthDataset, threshold: float, exponent: float = 0.5) -> np.ndarray:
    """Per-image factor ``r(I)``: the largest category factor among its classes."""
    per_class = category_repeat_factors(dataset, threshold, exponent)
    factors = np.ones(dataset.num_images, dtype=np.float64)
    for pos, image in enumerate(dataset.images):
        if image.instances:
            factors[pos] = max(per_class[c] for c in set(image.instances))
    return factors


def repeat_factor_epoch(factors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Image positions of one epoch with stochastic rounding of the factors."""
    whole = np.floor(factors)
    repeats = (whole + (rng.random(len(factors)) < factors - whole)).astype(np.int64)
    return rng.permutation(np.repeat(np.arange(len(factors)), repeats))


def epoch_inflation(factors: np.ndarray) -> float:
    """Expected number of extra images per epoch under repeat-factor sampling."""
    return float(np.sum(factors) - len(factors))


class RepeatFactorSampler:
    """Image-level repeat-factor sampling, as an endless batch stream."""

    def __init__(self, dataset: SynthDataset, config: SamplerConfig, rng: np.random.Generator):
        if dataset.num_images == 0:
            raise EmptyDatasetError("cannot sample batches from a dataset without images")
        self.dataset = dataset
        self.config = config
        self.rng = rng
        self.factors = image_repeat_factors(dataset, config.repeat_threshold, config.repeat_exponent)
        self.epoch_sizes: List[int] = []
        logger.info(
            "repeat-factor sampling at t=%g: %.1f extra images per epoch over %d",
            config.repeat_threshold,
            self.expected_inflation,
            dataset.num_images,
        )

    @property
    def expected_inflation(self) -> float:
        return epoch_inflation(self.factors)

    def _epoch(self) -> np.ndarray:
        order = repeat_factor_epoch(self.factors, self.rng)
        self.epoch_sizes.append(len(order))
        return order

    def batches(self) -> Iterator[np.ndarray]:
        return _epoch_batches(self._epoch, self.config.random_batch_images)


@dataclass(frozen=True, eq=False)
class CalBatch:
    """One bi-level calibration batch.

    ``class_groups[k]`` holds the proposal indices labelled
    ``sampled_classes[k]``; ``background`` holds label-0 proposals.
    """

    sampled_classes: Tuple[int, ...]
    class_groups: Tuple[np.ndarray, ...]
    background: np.ndarray
    images: np.ndarray
    skipped_classes: Tuple[int, ...] = ()

    @property
    def group_sizes(self) -> Tuple[int, ...]:
        return tuple(len(g) for g in self.class_groups)

    @property
    def fg_count(self) -> int:
        return int(sum(self.group_sizes))

    @property
    def bg_count(self) -> int:
        return len(self.background)

    def indices(self) -> np.ndarray:
        return np.concatenate(list(self.class_groups) + [self.background]).astype(np.int64)

    def groups(self) -> List[Tuple[int, np.ndarray]]:
        """(label, proposal indices) pairs, background (label 0) first."""
        return [(BACKGROUND, self.background)] + list(zip(self.sampled_classes, self.class_groups))


def background_target(fg_count: int, fg_bg_ratio: Sequence[int]) -> int:
    fg_parts, bg_parts = fg_bg_ratio
    return int(math.floor(fg_count * bg_parts / fg_parts + 0.5))


def sampleable_classes(dataset: SynthDataset) -> np.ndarray:
    classes = np.asarray(sorted(dataset.class_images), dtype=np.int64)
    missing = dataset.num_classes - len(classes)
    if missing:
        _warn_once(
            ("unsampleable", id(dataset)),
            "%d classes have no containing image and are excluded from bi-level sampling",
            missing,
        )
    return classes


def bilevel_sample_batch(
    dataset: SynthDataset, config: SamplerConfig, rng: np.random.Generator, reported: Optional[set] = None
) -> CalBatch:
    """Draw classes uniformly, then images per class, then keep matching proposals.

    Proposals labelled with a sampled class are kept from the union of drawn
    images; background proposals from the same images are subsampled to the
    configured fg:bg ratio. A class whose drawn images yield no proposal of
    that class is redrawn up to ``max_retries`` times and then skipped.
    Skips and background top-ups already in ``reported`` are logged at debug.
    """
    candidates = sampleable_classes(dataset)
    if len(candidates) == 0:
        raise EmptyDatasetError("no class has a containing image")
    n = config.classes_per_batch
    if not config.with_replacement and n > len(candidates):
        _warn_once(("clamp", n, len(candidates)), "only %d sampleable classes, wanted %d", len(candidates), n)
        n = len(candidates)
    sampled = rng.choice(candidates, size=n, replace=config.with_replacement)

    labels = dataset.labels
    chosen_images: List[np.ndarray] = []
    kept_classes: List[int] = []
    skipped: List[int] = []
    for class_id in sampled:
        pool = dataset.class_images[int(class_id)]
        for _ in range(config.max_retries + 1):
            images = rng.choice(pool, size=config.images_per_class, replace=len(pool) < config.images_per_class)
            props = np.concatenate([dataset.image_proposals[int(i)] for i in images])
            if np.any(labels[props] == class_id):
                chosen_images.append(images)
                kept_classes.append(int(class_id))
                break
        else:
            _warn_once(
                ("skipped", int(class_id)),
                "class %d yielded no foreground proposal after %d retries; skipped",
                class_id,
                config.max_retries,
                reported=reported,
            )
            skipped.append(int(class_id))

    images = np.unique(np.concatenate(chosen_images)) if chosen_images else np.empty(0, dtype=np.int64)
    props = (
        np.concatenate([dataset.image_proposals[int(i)] for i in images]) if len(images) else np.empty(0, np.int64)
    )
    prop_labels = labels[props]
    groups = tuple(props[prop_labels == c] for c in kept_classes)
    fg_count = int(sum(len(g) for g in groups))

    pool = props[prop_labels == BACKGROUND]
    wanted = background_target(fg_count, config.fg_bg_ratio)
    if wanted == 0:
        background = np.empty(0, dtype=np.int64)
    elif len(pool) >= wanted:
        background = np.sort(rng.choice(pool, size=wanted, replace=False))
    elif len(pool) > 0:
        _warn_once(
            "short_background",
            "only %d background proposals for %d wanted; topping up with replacement",
            len(pool),
            wanted,
            reported=reported,
        )
        background = np.sort(rng.choice(pool, size=wanted, replace=True))
    else:
        logger.warning("no background proposal in the drawn images; batch has foreground only")
        background = np.empty(0, dtype=np.int64)
    return CalBatch(tuple(kept_classes), groups, background, images, tuple(skipped))


class BilevelSampler:
    """Stateful bi-level sampler whose position can be saved and restored."""

    def __init__(self, dataset: SynthDataset, config: SamplerConfig, rng: Optional[np.random.Generator] = None):
        self.dataset = dataset
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.position = 0
        self.reported: set = set()

    def next_batch(self) -> CalBatch:
        batch = bilevel_sample_batch(self.dataset, self.config, self.rng, self.reported)
        self.position += 1
        return batch

    def __iter__(self) -> Iterator[CalBatch]:
        while True:
            yield self.next_batch()

    def state_dict(self) -> Dict[str, Any]:
        return {"seed": self.config.seed, "position": self.position, "bit_generator": self.rng.bit_generator.state}

    @classmethod
    def from_state(cls, dataset: SynthDataset, config: SamplerConfig, state: Dict[str, Any]) -> "BilevelSampler":
        sampler = cls(dataset, config, np.random.default_rng(state.get("seed", config.seed)))
        sampler.rng.bit_generator.state = state["bit_generator"]
        sampler.position = int(state["position"])
        return sampler


def selection_counts(batches: Sequence[CalBatch], num_classes: int) -> np.ndarray:
    """How often each class (1..C) was drawn over ``batches``; index 0 unused."""
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for batch in batches:
        np.add.at(counts, np.asarray(batch.sampled_classes + batch.skipped_classes, dtype=np.int64), 1)
    return counts


def uniformity_pvalue(counts: Sequence[int]) -> float:
    """Chi-square p-value of ``counts`` against a uniform expectation."""
    counts = np.asarray(counts, dtype=np.float64)
    return float(scipy_stats.chisquare(counts).pvalue)
