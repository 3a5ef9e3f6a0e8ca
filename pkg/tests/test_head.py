"""Tests for the classification head, its losses and the optimizer."""

import unittest
import sys
import os
import math
import tempfile
import shutil

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from simcal_lab.core_types import ClassStats, ConfigError, NonFiniteError, ShapeError
from simcal_lab.experiments import gradcheck_instance
from simcal_lab.head import (
    CE,
    FOCAL,
    MARGIN,
    REWEIGHT,
    HeadParams,
    HeadSpec,
    Layer,
    LossConfig,
    OptState,
    backward,
    batch_loss,
    class_margins,
    forward,
    grad_check,
    head_from_dict,
    head_to_dict,
    init_head,
    load_head,
    loss_ce,
    loss_focal,
    loss_margin,
    loss_reweight,
    predict_proba,
    reweight_weights,
    same_layers,
    save_head,
    sgd_step,
)


def small_head(seed=0, hidden=(5, 4), dim=3, classes=2):
    return init_head(dim, classes, HeadSpec(hidden=hidden), np.random.default_rng(seed))


class TestHeadStructure(unittest.TestCase):
    """Test head construction and inference."""

    def test_widths_and_init(self):
        head = small_head()
        self.assertEqual(head.widths, (3, 5, 4, 3))
        self.assertEqual(head.num_classes, 2)
        self.assertTrue(all(np.all(layer.bias == 0) for layer in head.layers))
        self.assertEqual(head.num_parameters, len(head.flat()))

    def test_chain_mismatch_rejected(self):
        with self.assertRaises(ShapeError):
            HeadParams((Layer(np.zeros((3, 4)), np.zeros(4)), Layer(np.zeros((5, 2)), np.zeros(2))))

    def test_zero_head_predicts_uniform(self):
        head = HeadParams((Layer(np.zeros((3, 4)), np.zeros(4)),))
        _, p = forward(head, np.ones((2, 3)))
        np.testing.assert_allclose(p, 0.25)

    def test_probabilities_sum_to_one(self):
        head = small_head()
        p = predict_proba(head, np.random.default_rng(1).normal(size=(20, 3)), chunk=7)
        self.assertEqual(p.shape, (20, 3))
        np.testing.assert_allclose(p.sum(axis=1), 1.0)

    def test_feature_dimension_checked(self):
        with self.assertRaises(ShapeError):
            forward(small_head(), np.ones((2, 4)))

    def test_invalid_spec(self):
        with self.assertRaises(ConfigError):
            HeadSpec(hidden=(0,))


class TestLosses(unittest.TestCase):
    """Test the per-sample losses on hand-computed values."""

    def setUp(self):
        self.stats = ClassStats(3, (1, 1000, 0), (1, 10, 0))

    def test_ce(self):
        self.assertAlmostEqual(loss_ce(np.array([0.5, 0.5]), 1), math.log(2), places=9)

    def test_focal_half_probability(self):
        """gamma 3 at q = 0.5 scales CE by 1/8."""
        self.assertAlmostEqual(loss_focal(np.array([0.5, 0.5]), 0, 3.0), 0.125 * math.log(2), places=9)

    def test_margin_on_equal_logits(self):
        """Margin 1 on zero logits gives log(1 + e)."""
        stats = ClassStats(1, (1,), (1,))
        self.assertAlmostEqual(loss_margin(np.zeros(2), 1, stats, 1.0), math.log(1 + math.e), places=9)

    def test_margins(self):
        margins = class_margins(ClassStats(2, (16, 0), (4, 0)), 6.0)
        np.testing.assert_allclose(margins, [0.0, 3.0, 6.0])

    def test_reweight_clamp(self):
        cfg = LossConfig(kind=REWEIGHT, reweight_numerator=100.0, background_weight=0.5)
        weights = reweight_weights(np.array([0, 1, 2, 3]), self.stats, cfg)
        np.testing.assert_allclose(weights, [0.5, 10.0, 0.1, 10.0])
        self.assertAlmostEqual(loss_reweight(np.array([0.5, 0.5, 0.0, 0.0]), 1, self.stats, cfg), 10 * math.log(2), places=6)

    def test_stats_required(self):
        with self.assertRaises(ConfigError):
            batch_loss(np.zeros((1, 3)), np.array([1]), LossConfig(kind=MARGIN))

    def test_empty_batch(self):
        with self.assertRaises(ShapeError):
            batch_loss(np.zeros((0, 3)), np.array([], dtype=int), LossConfig())

    def test_invalid_loss_config(self):
        with self.assertRaises(ConfigError):
            LossConfig(kind="hinge")
        with self.assertRaises(ConfigError):
            LossConfig(weight_clamp=(2.0, 1.0))

    def test_focal_gamma_zero_is_ce(self):
        logits = np.random.default_rng(2).normal(size=(6, 4))
        labels = np.array([0, 1, 2, 3, 0, 1])
        ce = batch_loss(logits, labels, LossConfig(kind=CE))
        focal = batch_loss(logits, labels, LossConfig(kind=FOCAL, gamma=0.0))
        self.assertEqual(ce[0], focal[0])
        np.testing.assert_array_equal(ce[2], focal[2])


class TestLossReductions(unittest.TestCase):
    """Focal, margin and reweight losses at their neutral settings are plain CE."""

    def setUp(self):
        rng = np.random.default_rng(11)
        self.classes = 10
        self.logits = rng.normal(0.0, 3.0, size=(1000, self.classes + 1))
        self.labels = rng.integers(0, self.classes + 1, size=1000)
        self.ce = batch_loss(self.logits, self.labels, LossConfig(kind=CE))[1]
        self.stats = ClassStats(self.classes, tuple(rng.integers(1, 5000, size=self.classes)), (1,) * self.classes)

    def assert_matches_ce(self, per_sample):
        self.assertLessEqual(float(np.max(np.abs(per_sample - self.ce))), 1e-12)

    def test_focal_gamma_zero(self):
        self.assert_matches_ce(batch_loss(self.logits, self.labels, LossConfig(kind=FOCAL, gamma=0.0))[1])

    def test_margin_zero(self):
        per_sample = batch_loss(self.logits, self.labels, LossConfig(kind=MARGIN, margin_c=0.0), self.stats)[1]
        self.assert_matches_ce(per_sample)

    def test_reweight_equal_counts(self):
        cfg = LossConfig(kind=REWEIGHT, reweight_numerator=100.0)
        stats = ClassStats(self.classes, (100,) * self.classes, (1,) * self.classes)
        self.assert_matches_ce(batch_loss(self.logits, self.labels, cfg, stats)[1])

    def test_per_sample_functions_agree(self):
        probs = forward(HeadParams((Layer(np.eye(self.classes + 1), np.zeros(self.classes + 1)),)), self.logits)[1]
        for k in range(1000):
            p, z = probs[k], int(self.labels[k])
            ce = loss_ce(p, z)
            self.assertLessEqual(abs(ce - self.ce[k]), 1e-12)
            self.assertLessEqual(abs(loss_focal(p, z, 0.0) - ce), 1e-12)
            self.assertLessEqual(abs(loss_margin(self.logits[k], z, self.stats, 0.0) - self.ce[k]), 1e-12)

    def test_confident_ce_is_not_negative(self):
        per_sample = batch_loss(np.array([[60.0, 0.0, 0.0]]), np.array([0]), LossConfig(kind=CE))[1]
        self.assertGreaterEqual(per_sample[0], 0.0)


class TestGradients(unittest.TestCase):
    """Test analytic gradients against central differences."""

    def test_every_loss_passes_grad_check(self):
        for kind in (CE, REWEIGHT, FOCAL, MARGIN):
            for seed in range(20):
                rng = np.random.default_rng(100 + seed)
                params, features, labels, stats = gradcheck_instance(rng)
                err = grad_check(params, features, labels, LossConfig(kind=kind), stats)
                self.assertLess(err, 1e-4, f"{kind} seed {seed}")

    def test_focal_alpha_gradient(self):
        params, features, labels, stats = gradcheck_instance(np.random.default_rng(5))
        self.assertLess(grad_check(params, features, labels, LossConfig(kind=FOCAL, focal_alpha=0.25), stats), 1e-4)

    def test_non_finite_named(self):
        head = small_head()
        broken = HeadParams((Layer(np.full((3, 5), np.inf), np.zeros(5)),) + head.layers[1:])
        with self.assertRaises(NonFiniteError) as ctx:
            backward(broken, np.ones((2, 3)), np.array([0, 1]), LossConfig())
        self.assertIn("layer 0", str(ctx.exception))


class TestOptimizer(unittest.TestCase):
    """Test SGD with classic momentum."""

    def test_two_steps_constant_gradient(self):
        """v1 = g, v2 = 1.9 g, so theta moves by -2.9 g at lr 1."""
        head = HeadParams((Layer(np.zeros((2, 2)), np.zeros(2)),))
        grads = HeadParams((Layer(np.ones((2, 2)), np.full(2, 2.0)),))
        opt = OptState.zeros_like(head, lr=1.0, momentum=0.9)
        for _ in range(2):
            head = sgd_step(head, grads, opt)
        np.testing.assert_allclose(head.layers[0].weight, -2.9)
        np.testing.assert_allclose(head.layers[0].bias, -5.8)

    def test_frozen_layers_are_same_arrays(self):
        head = small_head()
        _, grads = backward(head, np.ones((4, 3)), np.array([0, 1, 2, 1]), LossConfig())
        opt = OptState.zeros_like(head, lr=0.1)
        updated = sgd_step(head, grads, opt, trainable=[2])
        self.assertIs(updated.layers[0].weight, head.layers[0].weight)
        self.assertIs(updated.layers[1].bias, head.layers[1].bias)
        self.assertTrue(same_layers(head, updated, [0, 1]))
        self.assertFalse(same_layers(head, updated, [2]))

    def test_shape_mismatch(self):
        head = small_head()
        other = small_head(hidden=(4, 4))
        with self.assertRaises(ShapeError):
            sgd_step(head, other, OptState.zeros_like(head, lr=0.1))

    def test_state_dict(self):
        state = OptState.zeros_like(small_head(), lr=0.01).state_dict()
        self.assertEqual(state["lr"], 0.01)
        self.assertEqual(len(state["velocity"]), 3)


class TestHeadFiles(unittest.TestCase):
    """Test head serialization."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_save_and_load(self):
        head = small_head()
        path = os.path.join(self.temp_dir, "head.json")
        save_head(head, path)
        loaded = load_head(path)
        self.assertTrue(same_layers(head, loaded, range(3)))

    def test_bad_shape_rejected(self):
        data = head_to_dict(small_head())
        data["layers"][0]["shape"] = [4, 5]
        with self.assertRaises(ShapeError):
            head_from_dict(data)
        with self.assertRaises(ShapeError):
            head_from_dict({})


if __name__ == "__main__":
    unittest.main()
