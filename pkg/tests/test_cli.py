"""Tests for the simcal-lab command line."""

import unittest
import sys
import os
import io
import json
import tempfile
import shutil
from contextlib import redirect_stderr, redirect_stdout

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from simcal_lab.cli import build_parser, main

TINY = [
    "synth.num_classes=6",
    "synth.feature_dim=8",
    "synth.max_instances_per_head_class=60",
    "synth.head_tail_ratio=20",
    "head.hidden=16,16",
    "schedule.total_steps=40",
    "calibration.scale=0.005",
    "eval_split.instances_per_class=5",
    "sampler.classes_per_batch=4",
]


def run_cli(*argv):
    """Run the CLI quietly and return (exit code, stdout)."""
    args = list(argv) + ["--quiet", "--no-cache"]
    for item in TINY:
        args += ["--set", item]
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(args)
    return code, out.getvalue()


class TestPipeline(unittest.TestCase):
    """Run synth, train, calibrate, eval and compare end to end."""

    @classmethod
    def setUpClass(cls):
        cls.temp_dir = tempfile.mkdtemp()
        cls.synth_dir = os.path.join(cls.temp_dir, "synth")
        cls.code, cls.synth_out = run_cli("synth", "--out", cls.synth_dir)
        cls.train_json = os.path.join(cls.synth_dir, "train.json")
        cls.eval_json = os.path.join(cls.synth_dir, "eval.json")
        run_cli("train", "--dataset", cls.train_json, "--out", os.path.join(cls.temp_dir, "train"))
        cls.original = os.path.join(cls.temp_dir, "train", "original_head.json")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.temp_dir, ignore_errors=True)

    def _path(self, *parts):
        return os.path.join(self.temp_dir, *parts)

    def test_synth(self):
        self.assertEqual(self.code, 0)
        summary = json.loads(self.synth_out)
        self.assertEqual(summary["num_classes"], 6)
        self.assertEqual(set(summary["sha256"]), {"train.json", "eval.json"})
        for name in ("train.json", "eval.json", "summary.json", "config.ini"):
            self.assertTrue(os.path.exists(os.path.join(self.synth_dir, name)), name)

    def test_synth_is_deterministic(self):
        code, out = run_cli("synth", "--out", self._path("synth_again"))
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["sha256"], json.loads(self.synth_out)["sha256"])

    def test_train_outputs(self):
        self.assertTrue(os.path.exists(self.original))
        with open(self._path("train", "train_log.jsonl")) as f:
            self.assertEqual(len(f.read().splitlines()), 40)

    def test_calibrate_eval_compare(self):
        code, _ = run_cli(
            "calibrate", "--dataset", self.train_json, "--head", self.original, "--out", self._path("calibrate")
        )
        self.assertEqual(code, 0)
        calibrated = self._path("calibrate", "calibrated_head.json")

        code, out = run_cli(
            "eval", "--dataset", self.train_json, "--eval-dataset", self.eval_json,
            "--head", self.original, "--out", self._path("eval_original"),
        )
        self.assertEqual(code, 0)
        self.assertIn("ap", json.loads(out))

        code, _ = run_cli(
            "eval", "--dataset", self.train_json, "--eval-dataset", self.eval_json,
            "--head", calibrated, "--original", self.original, "--scheme", "sel", "--out", self._path("eval_dual"),
        )
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(self._path("eval_dual", "predictions.json")))
        with open(self._path("eval_dual", "report.json")) as f:
            self.assertEqual(json.load(f)["metadata"]["predictor"], "sel")

        code, out = run_cli(
            "compare", self._path("eval_original", "report.json"), self._path("eval_dual", "report.json"),
            "--out", self._path("compare"),
        )
        self.assertEqual(code, 0)
        self.assertIn("tail_improved", out)
        with open(self._path("compare", "comparison.csv")) as f:
            self.assertTrue(f.readline().startswith("metric,"))

    def test_oracle_eval(self):
        code, out = run_cli(
            "eval", "--dataset", self.train_json, "--eval-dataset", self.eval_json, "--oracle", "--out", self._path("oracle")
        )
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["ap"], 1.0)

    def test_eval_needs_a_head(self):
        code, _ = run_cli("eval", "--dataset", self.train_json, "--eval-dataset", self.eval_json, "--out", self._path("x"))
        self.assertEqual(code, 2)

    def test_ablate(self):
        code, out = run_cli("ablate", "T", "--grid", "0,50", "--head", self.original, "--out", self._path("ablate"))
        self.assertEqual(code, 0)
        self.assertTrue(out.strip().endswith("sweep_T.csv"))
        with open(self._path("ablate", "sweep_T.csv")) as f:
            self.assertEqual(len(f.read().splitlines()), 3)

    def test_ablate_bad_grid(self):
        code, _ = run_cli("ablate", "layers", "--grid", "first", "--head", self.original, "--out", self._path("y"))
        self.assertEqual(code, 2)

    def test_missing_file_fails(self):
        code, _ = run_cli("train", "--dataset", self._path("nope.json"), "--out", self._path("z"))
        self.assertEqual(code, 1)


class TestArguments(unittest.TestCase):
    """Test argument and override errors."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_unknown_experiment(self):
        code, _ = run_cli("repro", "table99", "--out", self.temp_dir)
        self.assertEqual(code, 2)

    def test_bad_override(self):
        code, _ = run_cli("synth", "--set", "combine.nope=1", "--out", self.temp_dir)
        self.assertEqual(code, 2)
        code, _ = run_cli("synth", "--set", "no_equals_sign", "--out", self.temp_dir)
        self.assertEqual(code, 2)

    def test_repro_gradcheck(self):
        code, out = run_cli("repro", "gradcheck", "--out", self.temp_dir)
        self.assertEqual(code, 0)
        self.assertIn("| gradcheck | all_below_1e-4 | yes |", out)

    def test_parser_errors(self):
        parser = build_parser()
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                parser.parse_args([])
            with self.assertRaises(SystemExit):
                parser.parse_args(["ablate", "momentum", "--grid", "1"])
        args = parser.parse_args(["eval", "--oracle", "--seed", "3"])
        self.assertTrue(args.oracle)
        self.assertEqual(args.seed, 3)


if __name__ == "__main__":
    unittest.main()
