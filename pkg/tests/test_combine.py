"""Tests for dual-head combination schemes."""

import unittest
import sys
import os
import tempfile
import shutil
from unittest.mock import patch

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from simcal_lab.combine import (
    AVG,
    CAL_ONLY,
    DET,
    ORIG_ONLY,
    SEL,
    SEL_NORM,
    SEL_SCALE,
    SEL_THR,
    CombineConfig,
    background_ratio,
    batch_combine,
    calibrated_mask,
    combine,
    load_predictions,
    save_predictions,
)
from simcal_lab.core_types import (
    ClassStats,
    ConfigError,
    DegeneratePredictionError,
    PredictionVector,
    ShapeError,
)


class TestSelection(unittest.TestCase):
    """Test the boundary routing with counts 50, 300, 900 and T = 300."""

    def setUp(self):
        self.stats = ClassStats(3, (50, 300, 900), (40, 200, 500))
        self.p_cal = np.array([[0.1, 0.4, 0.3, 0.2], [0.7, 0.1, 0.1, 0.1]])
        self.p_orig = np.array([[0.6, 0.05, 0.05, 0.3], [0.2, 0.3, 0.2, 0.3]])

    def test_mask(self):
        np.testing.assert_array_equal(calibrated_mask(self.stats, 300), [False, True, True, False])
        np.testing.assert_array_equal(calibrated_mask(self.stats, 300, "cal"), [True, True, True, False])

    def test_sel_routes_by_count(self):
        out = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL, T=300))
        np.testing.assert_array_equal(out[0], [0.6, 0.4, 0.3, 0.3])
        np.testing.assert_array_equal(out[1], [0.2, 0.1, 0.1, 0.3])

    def test_single_vector_matches_batch(self):
        cfg = CombineConfig(SEL, T=300)
        out = combine(PredictionVector(tuple(self.p_cal[0])), PredictionVector(tuple(self.p_orig[0])), self.stats, cfg)
        self.assertEqual(out.scores, (0.6, 0.4, 0.3, 0.3))

    def test_boundary_extremes(self):
        """T below every count is the original head; T above is the calibrated one."""
        low = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL, T=0))
        np.testing.assert_array_equal(low, self.p_orig)
        high = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL, T=10**6, sel_bg="cal"))
        np.testing.assert_array_equal(high, self.p_cal)

    def test_trivial_schemes(self):
        np.testing.assert_array_equal(batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(ORIG_ONLY)), self.p_orig)
        np.testing.assert_array_equal(batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(CAL_ONLY)), self.p_cal)
        np.testing.assert_allclose(
            batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(AVG)), (self.p_cal + self.p_orig) / 2
        )

    def test_threshold(self):
        out = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL_THR, T=300, thr=0.15))
        np.testing.assert_array_equal(out[1], [0.2, 0.0, 0.0, 0.3])
        np.testing.assert_array_equal(out[0], [0.6, 0.4, 0.3, 0.3])

    def test_scale(self):
        ratio = background_ratio(self.p_cal, self.p_orig)
        self.assertAlmostEqual(ratio, 0.4 / 0.4)
        out = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL_SCALE, T=300))
        np.testing.assert_allclose(out[0, 1:3], self.p_cal[0, 1:3] * ratio)

    def test_normalized_rows_sum_to_one(self):
        out = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(SEL_NORM, T=300))
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_normalize_zero_row(self):
        zeros = np.zeros((1, 4))
        with self.assertRaises(DegeneratePredictionError):
            batch_combine(zeros, zeros, self.stats, CombineConfig(SEL_NORM, T=300))

    def test_det_union(self):
        out = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(DET))
        np.testing.assert_array_equal(out[:, 1:], np.maximum(self.p_cal[:, 1:], self.p_orig[:, 1:]))
        np.testing.assert_array_equal(out[:, 0], self.p_orig[:, 0])
        top1 = batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(DET, det_top_k=1))
        # class 1: calibrated keeps row 0, original keeps row 1
        np.testing.assert_array_equal(top1[:, 1], [0.4, 0.3])

    def test_misaligned_inputs(self):
        with self.assertRaises(ShapeError):
            batch_combine(self.p_cal, self.p_orig[:1], self.stats, CombineConfig())
        with self.assertRaises(ShapeError):
            batch_combine(self.p_cal, self.p_orig, self.stats, CombineConfig(), ids_cal=[1, 2], ids_orig=[2, 1])
        with self.assertRaises(ShapeError):
            batch_combine(self.p_cal[:, :3], self.p_orig[:, :3], self.stats, CombineConfig())

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            CombineConfig("max")
        with self.assertRaises(ConfigError):
            CombineConfig(T=-1)
        with self.assertRaises(ConfigError):
            CombineConfig(sel_bg="both")


class TestRoutingProperties(unittest.TestCase):
    """Test the count-boundary routing on random statistics and predictions."""

    def random_case(self, rng):
        classes = int(rng.integers(2, 30))
        counts = rng.integers(0, 2000, size=classes)
        counts[rng.random(classes) < 0.1] = 0
        stats = ClassStats(classes, tuple(counts), tuple(np.minimum(counts, 1)))
        rows = int(rng.integers(1, 40))
        p_cal = rng.dirichlet(np.ones(classes + 1), size=rows)
        p_orig = rng.dirichlet(np.ones(classes + 1), size=rows)
        return stats, counts, p_cal, p_orig

    def test_sel_takes_each_entry_from_one_head(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            stats, counts, p_cal, p_orig = self.random_case(rng)
            T = int(rng.integers(0, 2100))
            out = batch_combine(p_cal, p_orig, stats, CombineConfig(SEL, T=T))
            np.testing.assert_array_equal(out[:, 0], p_orig[:, 0])
            for z in range(1, stats.num_classes + 1):
                source = p_cal if counts[z - 1] <= T else p_orig
                np.testing.assert_array_equal(out[:, z], source[:, z])

    def test_calibrated_classes_grow_with_T(self):
        stats, counts, p_cal, p_orig = self.random_case(np.random.default_rng(22))
        previous = set()
        for T in range(0, int(counts.max()) + 2):
            out = batch_combine(p_cal, p_orig, stats, CombineConfig(SEL, T=T))
            calibrated = {z for z in range(1, stats.num_classes + 1) if np.array_equal(out[:, z], p_cal[:, z])}
            self.assertTrue(previous <= calibrated, T)
            self.assertEqual(calibrated, set(np.nonzero(calibrated_mask(stats, T))[0]))
            previous = calibrated
        self.assertEqual(previous, set(range(1, stats.num_classes + 1)))

    def test_scale_ratio_computed_once_per_set(self):
        stats, counts, p_cal, p_orig = self.random_case(np.random.default_rng(23))
        cfg = CombineConfig(SEL_SCALE, T=1000)
        with patch("simcal_lab.combine.background_ratio", wraps=background_ratio) as ratio:
            out = batch_combine(p_cal, p_orig, stats, cfg)
        self.assertEqual(ratio.call_count, 1)
        scale = np.mean(p_orig[:, 0]) / np.mean(p_cal[:, 0])
        mask = calibrated_mask(stats, 1000)
        np.testing.assert_allclose(out[:, mask], p_cal[:, mask] * scale, rtol=1e-12)
        np.testing.assert_array_equal(out[:, ~mask], p_orig[:, ~mask])


class TestPredictionFiles(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_save_and_load(self):
        scores = np.array([[0.5, 0.5], [0.25, 0.75]])
        path = os.path.join(self.temp_dir, "predictions.json")
        save_predictions([7, 9], scores, path)
        ids, loaded = load_predictions(path)
        np.testing.assert_array_equal(ids, [7, 9])
        np.testing.assert_array_equal(loaded, scores)


if __name__ == "__main__":
    unittest.main()
