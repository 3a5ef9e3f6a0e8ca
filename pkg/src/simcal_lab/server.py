"""SimCal Lab MCP Server - exposes the lab's experiments as tools."""

import asyncio
import json
import os
import sys
from typing import Any, Optional

from mcp.server import Server
from mcp.server.stdio import stdio_server
from mcp.types import TextContent, Tool

from .cache import DatasetCache, dataset_key
from .config import RunConfig, cache_dir, output_root
from .core_types import SimCalError
from .evaluator import compare, load_report
from .experiments import EXPERIMENTS, ExperimentFailed, render_verdicts, run_experiment
from .synth import SynthConfig, SynthDataset, generate, summarize


def _text(text: str) -> list[TextContent]:
    return [TextContent(type="text", text=text)]


class SimCalLabMCPServer:
    """MCP Server for the calibration lab."""

    def __init__(self, cache: Optional[DatasetCache] = None):
        self.server = Server("simcal-lab")
        self.cache = cache
        self._setup_handlers()

    def _setup_handlers(self):
        """Setup MCP server handlers."""

        @self.server.list_tools()
        async def handle_list_tools() -> list[Tool]:
            """List available tools."""
            return [
                Tool(
                    name="list_experiments",
                    description="List the named experiments the lab can run",
                    inputSchema={"type": "object", "properties": {}},
                ),
                Tool(
                    name="run_experiment",
                    description="Run one named experiment and report its verdicts",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "name": {"type": "string", "description": "Experiment name (e.g., 'table3', 'fig4c')"},
                            "out_dir": {"type": "string", "description": "Output directory (optional)"},
                            "seed": {"type": "integer", "description": "Root seed (optional)"},
                        },
                        "required": ["name"],
                    },
                ),
                Tool(
                    name="summarize_dataset",
                    description="Generate the configured training dataset and summarize its class distribution",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "config_path": {"type": "string", "description": "Run configuration file (optional)"},
                            "seed": {"type": "integer", "description": "Root seed (optional)"},
                        },
                    },
                ),
                Tool(
                    name="compare_reports",
                    description="Compare two saved evaluation reports",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "report_a": {"type": "string", "description": "Path of the baseline report JSON"},
                            "report_b": {"type": "string", "description": "Path of the candidate report JSON"},
                        },
                        "required": ["report_a", "report_b"],
                    },
                ),
            ]

        @self.server.call_tool()
        async def handle_call_tool(name: str, arguments: dict[str, Any]) -> list[TextContent]:
            """Handle tool calls."""
            return await self.dispatch(name, arguments or {})

    async def dispatch(self, name: str, arguments: dict[str, Any]) -> list[TextContent]:
        if name == "list_experiments":
            return await self._list_experiments()
        elif name == "run_experiment":
            return await self._run_experiment(arguments.get("name"), arguments.get("out_dir"), arguments.get("seed"))
        elif name == "summarize_dataset":
            return await self._summarize_dataset(arguments.get("config_path"), arguments.get("seed"))
        elif name == "compare_reports":
            return await self._compare_reports(arguments.get("report_a"), arguments.get("report_b"))
        else:
            return _text(f"Unknown tool: {name}")

    @staticmethod
    def _config(config_path: Optional[str], seed: Optional[int]) -> RunConfig:
        overrides = {} if seed is None else {"run.seed": int(seed)}
        return RunConfig.load(config_path, overrides)

    async def _list_experiments(self) -> list[TextContent]:
        content = "# Experiments\n\n"
        for exp_name, (_, description) in EXPERIMENTS.items():
            content += f"- **{exp_name}**: {description}\n"
        return _text(content)

    async def _run_experiment(
        self, exp_name: Optional[str], out_dir: Optional[str] = None, seed: Optional[int] = None
    ) -> list[TextContent]:
        if not exp_name:
            return _text("Error: name is required")
        if exp_name not in EXPERIMENTS:
            return _text(f"Error: unknown experiment '{exp_name}'. Available: {', '.join(EXPERIMENTS)}")
        try:
            config = self._config(None, seed)
        except SimCalError as e:
            return _text(f"Error: {e}")
        out_dir = out_dir or os.path.join(output_root(), exp_name)
        try:
            verdict = await asyncio.to_thread(run_experiment, exp_name, config, out_dir, self.cache)
        except ExperimentFailed as e:
            return _text(f"Error: {e}\n\nPartial outputs in {out_dir}")
        content = f"# {exp_name}\n\nOutputs: {out_dir}\n\n{render_verdicts([verdict])}\n"
        return _text(content)

    def _training_split(self, synth: SynthConfig) -> SynthDataset:
        if self.cache is None:
            return generate(synth)
        return self.cache.get_or_create(dataset_key("train", synth), lambda: generate(synth))

    async def _summarize_dataset(self, config_path: Optional[str] = None, seed: Optional[int] = None) -> list[TextContent]:
        try:
            config = self._config(config_path, seed)
            synth = config.synth_config()
            dataset = await asyncio.to_thread(self._training_split, synth)
        except SimCalError as e:
            return _text(f"Error: {e}")
        summary = summarize(dataset, config.instance_bins(), config.image_sets())
        return _text(json.dumps(summary, indent=2, sort_keys=True))

    async def _compare_reports(self, report_a: Optional[str], report_b: Optional[str]) -> list[TextContent]:
        if not report_a or not report_b:
            return _text("Error: report_a and report_b are required")
        try:
            comparison = compare(load_report(report_a), load_report(report_b), ("a", "b"))
        except (SimCalError, OSError, ValueError) as e:
            return _text(f"Error: {e}")
        return _text(comparison.render())

    async def run(self):
        """Run the MCP server."""
        async with stdio_server() as (read_stream, write_stream):
            await self.server.run(read_stream, write_stream, self.server.create_initialization_options())


async def main():
    """Main entry point."""
    # stdout is reserved for the MCP protocol
    import signal

    from . import __version__

    def signal_handler(signum, frame):
        print("🛑 Shutting down SimCal Lab MCP Server...", file=sys.stderr)
        sys.exit(0)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    print(f"🚀 SimCal Lab MCP Server v{__version__}", file=sys.stderr)
    print(f"🧪 {len(EXPERIMENTS)} experiments available", file=sys.stderr)
    print(f"💾 Dataset cache: {cache_dir()}", file=sys.stderr)
    print("🔌 Starting MCP server...", file=sys.stderr)
    print("", file=sys.stderr)

    try:
        server = SimCalLabMCPServer(DatasetCache(cache_dir()))
        await server.run()
    except KeyboardInterrupt:
        print("🛑 Shutting down SimCal Lab MCP Server...", file=sys.stderr)
    except Exception as e:
        print(f"❌ Server error: {e}", file=sys.stderr)
        sys.exit(1)


def cli_main():
    """CLI entry point for setuptools."""
    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        print("🛑 Shutting down SimCal Lab MCP Server...", file=sys.stderr)
        sys.exit(0)


if __name__ == "__main__":
    cli_main()
