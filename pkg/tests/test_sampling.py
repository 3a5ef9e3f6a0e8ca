"""Tests for random, repeat-factor and bi-level batch construction."""

import unittest
import sys
import os

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from simcal_lab.core_types import ConfigError
from simcal_lab.sampling import (
    BilevelSampler,
    RepeatFactorSampler,
    SamplerConfig,
    background_target,
    bilevel_sample_batch,
    category_frequencies,
    category_repeat_factors,
    epoch_inflation,
    image_repeat_factors,
    random_image_batches,
    repeat_factor,
    repeat_factor_epoch,
    selection_counts,
    uniformity_pvalue,
)
from simcal_lab.synth import SynthConfig, explicit_config, generate


def tiny_dataset(**overrides):
    values = dict(num_classes=6, feature_dim=8, max_instances_per_head_class=60, head_tail_ratio=20.0, seed=3)
    values.update(overrides)
    return generate(SynthConfig(**values))


class TestRandomBatches(unittest.TestCase):
    """Test uniform image epochs."""

    def test_every_image_once_per_epoch(self):
        dataset = tiny_dataset()
        batches = random_image_batches(dataset, 4, np.random.default_rng(0))
        seen = []
        while len(seen) < dataset.num_images:
            seen.extend(next(batches).tolist())
        self.assertEqual(sorted(seen), list(range(dataset.num_images)))

    def test_invalid_batch_size(self):
        with self.assertRaises(ConfigError):
            random_image_batches(tiny_dataset(), 0, np.random.default_rng(0))


class TestRepeatFactor(unittest.TestCase):
    """Test repeat-factor sampling."""

    def test_square_root_rule(self):
        """A category at a quarter of the threshold is repeated twice."""
        self.assertEqual(repeat_factor(0.001 / 4, 0.001), 2.0)
        self.assertEqual(repeat_factor(0.001, 0.001), 1.0)
        self.assertEqual(repeat_factor(0.5, 0.001), 1.0)
        with self.assertRaises(ConfigError):
            repeat_factor(0.0, 0.001)

    def test_image_factor_is_max_over_classes(self):
        dataset = tiny_dataset()
        per_class = category_repeat_factors(dataset, 0.5)
        factors = image_repeat_factors(dataset, 0.5)
        for pos, image in enumerate(dataset.images):
            self.assertAlmostEqual(factors[pos], max(per_class[c] for c in image.instances))

    def test_epoch_matches_rounded_factors(self):
        factors = np.array([1.0, 2.0, 3.0])
        epoch = repeat_factor_epoch(factors, np.random.default_rng(0))
        self.assertEqual(np.bincount(epoch).tolist(), [1, 2, 3])
        self.assertEqual(epoch_inflation(factors), 3.0)

    def test_stochastic_rounding_mean(self):
        factors = np.array([1.5])
        rng = np.random.default_rng(1)
        sizes = [len(repeat_factor_epoch(factors, rng)) for _ in range(4000)]
        self.assertAlmostEqual(float(np.mean(sizes)), 1.5, delta=0.05)

    def test_sampler_records_epochs(self):
        dataset = tiny_dataset()
        sampler = RepeatFactorSampler(dataset, SamplerConfig(repeat_threshold=0.5, random_batch_images=1000), np.random.default_rng(0))
        batch = next(sampler.batches())
        self.assertEqual(len(batch), sampler.epoch_sizes[0])
        self.assertGreaterEqual(sampler.expected_inflation, 0.0)

    def test_no_inflation_at_or_below_every_frequency(self):
        dataset = tiny_dataset()
        freqs = category_frequencies(dataset)[1:]
        threshold = float(freqs[freqs > 0].min())
        self.assertEqual(epoch_inflation(image_repeat_factors(dataset, threshold)), 0.0)
        sampler = RepeatFactorSampler(
            dataset, SamplerConfig(repeat_threshold=threshold, random_batch_images=1000), np.random.default_rng(0)
        )
        next(sampler.batches())
        self.assertEqual(sampler.epoch_sizes, [dataset.num_images])

    def test_inflation_when_a_class_is_rare(self):
        dataset = tiny_dataset()
        freqs = category_frequencies(dataset)[1:]
        threshold = 2 * float(freqs[freqs > 0].min())
        self.assertLess(threshold, 1.0)
        self.assertGreater(epoch_inflation(image_repeat_factors(dataset, threshold)), 0.0)


class TestBilevel(unittest.TestCase):
    """Test bi-level calibration batches."""

    def setUp(self):
        self.dataset = tiny_dataset()
        self.config = SamplerConfig(classes_per_batch=4)

    def test_background_target_rounding(self):
        self.assertEqual(background_target(3, (1, 3)), 9)
        self.assertEqual(background_target(5, (2, 1)), 3)
        self.assertEqual(background_target(0, (1, 1)), 0)

    def test_batch_membership(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = bilevel_sample_batch(self.dataset, self.config, rng)
            self.assertEqual(len(set(batch.sampled_classes)), len(batch.sampled_classes))
            for class_id, group in zip(batch.sampled_classes, batch.class_groups):
                self.assertTrue(np.all(self.dataset.labels[group] == class_id))
                self.assertGreater(len(group), 0)
            self.assertTrue(np.all(self.dataset.labels[batch.background] == 0))
            self.assertEqual(batch.bg_count, background_target(batch.fg_count, (1, 1)))
            images = set(batch.images.tolist())
            for index in batch.indices():
                self.assertIn(int(self.dataset.proposal_image[index]), images)
            self.assertEqual(batch.groups()[0][0], 0)

    def test_single_image_class(self):
        """A class in exactly one image always brings that image."""
        dataset = generate(explicit_config([1, 40, 40], feature_dim=4, seed=2, iou_beta_a=50.0, iou_beta_b=1.0))
        only = int(dataset.class_images[1][0])
        rng = np.random.default_rng(0)
        for _ in range(10):
            batch = bilevel_sample_batch(dataset, SamplerConfig(classes_per_batch=3), rng)
            if 1 in batch.sampled_classes:
                self.assertIn(only, batch.images.tolist())

    def test_too_few_classes_clamped(self):
        batch = bilevel_sample_batch(self.dataset, SamplerConfig(classes_per_batch=50), np.random.default_rng(0))
        self.assertLessEqual(len(batch.sampled_classes) + len(batch.skipped_classes), 6)

    def test_repeated_skips_warn_once(self):
        """Classes whose proposals are all background are skipped, warned about once each."""
        dataset = generate(explicit_config([5, 5], feature_dim=4, seed=2, iou_beta_a=1.0, iou_beta_b=50.0))
        sampler = BilevelSampler(dataset, SamplerConfig(classes_per_batch=2, max_retries=0), np.random.default_rng(0))
        with self.assertLogs("simcal_lab.sampling", level="WARNING") as logs:
            for _ in range(5):
                self.assertEqual(sorted(sampler.next_batch().skipped_classes), [1, 2])
        self.assertEqual(sum("skipped" in line for line in logs.output), 2)

    def test_state_round_trip(self):
        """A restored sampler continues with the same batches."""
        sampler = BilevelSampler(self.dataset, self.config, np.random.default_rng(7))
        for _ in range(3):
            sampler.next_batch()
        state = sampler.state_dict()
        expected = [sampler.next_batch() for _ in range(2)]
        restored = BilevelSampler.from_state(self.dataset, self.config, state)
        self.assertEqual(restored.position, 3)
        for batch in expected:
            again = restored.next_batch()
            self.assertEqual(again.sampled_classes, batch.sampled_classes)
            np.testing.assert_array_equal(again.indices(), batch.indices())

    def test_class_selection_uniform(self):
        """Ten thousand batches of 16 out of 100 classes."""
        dataset = generate(explicit_config([3] * 100, feature_dim=4, seed=11, iou_beta_a=50.0, iou_beta_b=1.0))
        sampler = BilevelSampler(dataset, SamplerConfig(classes_per_batch=16), np.random.default_rng(0))
        batches = []
        for _ in range(10000):
            batch = sampler.next_batch()
            expected = np.concatenate([np.full(len(g), c) for c, g in zip(batch.sampled_classes, batch.class_groups)])
            np.testing.assert_array_equal(dataset.labels[np.concatenate(batch.class_groups)], expected)
            self.assertTrue(np.all(dataset.labels[batch.background] == 0))
            self.assertLessEqual(abs(batch.bg_count - batch.fg_count), 1)
            batches.append(batch)
        counts = selection_counts(batches, 100)[1:]
        self.assertGreater(uniformity_pvalue(counts), 0.01)


if __name__ == "__main__":
    unittest.main()
