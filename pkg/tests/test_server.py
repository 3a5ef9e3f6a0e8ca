"""Tests for the SimCal Lab MCP server."""

import unittest
import asyncio
from unittest.mock import Mock, patch

import sys
import os
import tempfile
import shutil

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from simcal_lab.cache import DatasetCache
from simcal_lab.server import SimCalLabMCPServer
from simcal_lab.evaluator import oracle_predictions, evaluate, save_report
from simcal_lab.experiments import ExperimentFailed
from simcal_lab.synth import SynthConfig, generate, generate_eval
from mcp.types import TextContent


def call(server, name, arguments=None):
    return asyncio.run(server.dispatch(name, arguments or {}))


class TestSimCalLabMCPServer(unittest.TestCase):
    """Test cases for SimCalLabMCPServer."""

    def setUp(self):
        """Set up test fixtures."""
        self.server = SimCalLabMCPServer()
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_server_initialization(self):
        """Test server initialization."""
        self.assertIsNotNone(self.server.server)
        self.assertIsNone(self.server.cache)

    def test_list_experiments(self):
        result = call(self.server, "list_experiments")
        self.assertEqual(len(result), 1)
        self.assertIsInstance(result[0], TextContent)
        self.assertIn("**table3**", result[0].text)
        self.assertIn("**gradcheck**", result[0].text)

    def test_unknown_tool(self):
        result = call(self.server, "train_detector")
        self.assertEqual(result[0].text, "Unknown tool: train_detector")

    def test_run_experiment_requires_known_name(self):
        self.assertIn("name is required", call(self.server, "run_experiment")[0].text)
        text = call(self.server, "run_experiment", {"name": "table99"})[0].text
        self.assertIn("unknown experiment 'table99'", text)

    @patch("simcal_lab.server.run_experiment")
    def test_run_experiment_success(self, mock_run):
        mock_run.return_value = {"experiment": "table3", "verdicts": {"tail_improved": True}, "all_passed": True}
        text = call(self.server, "run_experiment", {"name": "table3", "out_dir": self.temp_dir, "seed": 7})[0].text
        self.assertIn("| table3 | tail_improved | yes |", text)
        name, config, out_dir, cache = mock_run.call_args[0]
        self.assertEqual(name, "table3")
        self.assertEqual(config.seed, 7)
        self.assertEqual(out_dir, self.temp_dir)

    @patch("simcal_lab.server.run_experiment")
    def test_run_experiment_failure(self, mock_run):
        mock_run.side_effect = ExperimentFailed("table3", "calibrate", ValueError("boom"))
        text = call(self.server, "run_experiment", {"name": "table3", "out_dir": self.temp_dir})[0].text
        self.assertTrue(text.startswith("Error: table3: stage 'calibrate' failed"))
        self.assertIn(self.temp_dir, text)

    def write_tiny_config(self):
        path = os.path.join(self.temp_dir, "tiny.ini")
        with open(path, "w") as f:
            f.write("[synth]\nnum_classes = 5\nfeature_dim = 4\nmax_instances_per_head_class = 30\nhead_tail_ratio = 10\n")
        return path

    def test_summarize_dataset(self):
        text = call(self.server, "summarize_dataset", {"config_path": self.write_tiny_config()})[0].text
        self.assertIn('"num_classes": 5', text)

    def test_summarize_dataset_reads_cache(self):
        path = self.write_tiny_config()
        cache_dir = os.path.join(self.temp_dir, "cache")
        first = call(SimCalLabMCPServer(DatasetCache(cache_dir)), "summarize_dataset", {"config_path": path})[0].text
        self.assertEqual(len([f for f in os.listdir(cache_dir) if f.endswith(".pkl")]), 1)
        with patch("simcal_lab.server.generate", side_effect=AssertionError("regenerated")):
            second = call(SimCalLabMCPServer(DatasetCache(cache_dir)), "summarize_dataset", {"config_path": path})[0].text
        self.assertEqual(first, second)

    def test_summarize_dataset_bad_config(self):
        text = call(self.server, "summarize_dataset", {"config_path": os.path.join(self.temp_dir, "missing.ini")})[0].text
        self.assertTrue(text.startswith("Error:"))

    def test_compare_reports(self):
        config = SynthConfig(num_classes=5, feature_dim=4, max_instances_per_head_class=30, head_tail_ratio=10.0)
        train = generate(config)
        eval_set = generate_eval(config, 4)
        report = evaluate(oracle_predictions(eval_set), eval_set, train_stats=train.stats)
        path_a = os.path.join(self.temp_dir, "a.json")
        path_b = os.path.join(self.temp_dir, "b.json")
        save_report(report, path_a)
        save_report(report, path_b)
        text = call(self.server, "compare_reports", {"report_a": path_a, "report_b": path_b})[0].text
        self.assertIn("tail_improved: no", text)
        self.assertIn("Error", call(self.server, "compare_reports", {"report_a": path_a})[0].text)
        missing = call(self.server, "compare_reports", {"report_a": path_a, "report_b": path_a + ".gone"})[0].text
        self.assertTrue(missing.startswith("Error:"))

    def test_dispatch_uses_cache(self):
        cache = Mock()
        server = SimCalLabMCPServer(cache)
        with patch("simcal_lab.server.run_experiment") as mock_run:
            mock_run.return_value = {"experiment": "fig1c", "verdicts": {}, "all_passed": True}
            call(server, "run_experiment", {"name": "fig1c", "out_dir": self.temp_dir})
        self.assertIs(mock_run.call_args[0][3], cache)


if __name__ == "__main__":
    unittest.main()
