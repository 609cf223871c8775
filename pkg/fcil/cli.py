"""Command-line interface: `fcil run | ablation | compare | plot`."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import ValidationError

from fcil import __version__
from fcil.graph import run_label, run_seeds, seed_failed
from fcil.models import ExperimentConfig, ExperimentProgress
from fcil.studies import DEFAULT_SIGMAS, plot_directory, run_ablation, run_compare

logger = logging.getLogger(__name__)


def on_progress(progress: ExperimentProgress):
    """Print pipeline progress to terminal."""
    icon = {
        "prepare": "[>]",
        "train": "[*]",
        "metrics": "[=]",
        "artifacts": "[#]",
        "report": "[#]",
        "complete": "[+]",
        "error": "[!]",
    }.get(progress.stage, "[.]")
    print(f"  {icon} [{progress.stage.upper():>9}] {progress.run_id}: {progress.message} ({progress.progress_pct}%)")


def load_config(path: str | None, overrides: dict[str, Any]) -> ExperimentConfig:
    """Flat JSON config file (or the desk profile when no file is given) plus CLI overrides."""
    if path is None:
        return ExperimentConfig.desk(**overrides)
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return overrides


def _banner(title: str, detail: str):
    print(f"\n{'='*60}")
    print(f"  fcil-lab v{__version__}: {title}")
    print(f"  {detail}")
    print(f"{'='*60}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


async def cmd_run(config: ExperimentConfig) -> int:
    _banner(f"{run_label(config)} run", f"seeds {config.seeds}, σ={config.sigma}, T={config.T}, R={config.R}")
    states = await run_seeds(config, progress_callback=on_progress)

    print(f"\n{'='*60}")
    failed = 0
    for state in states:
        seed = state["seed"]
        if seed_failed(state):
            failed += 1
            print(f"  seed {seed}: ABORTED")
            for err in state.get("errors", []):
                print(f"    [!] {err}")
            continue
        m = state["metrics"]
        print(f"  seed {seed}: A_avg={m.A_avg:.2%}  A_last={m.A_last:.2%}  Forgetting={m.Forgetting}")
        print(f"    run dir: {state['run_dir']}")
        for err in state.get("errors", []):
            print(f"    [!] {err}")
    print(f"{'='*60}\n")
    return 1 if failed else 0


async def cmd_ablation(config: ExperimentConfig) -> int:
    _banner("component ablation", f"seeds {config.seeds}, σ={config.sigma}")
    table, results = await run_ablation(config, progress_callback=on_progress)
    print()
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    print()
    return 0 if all(results.values()) else 1


async def cmd_compare(config: ExperimentConfig, sigmas: tuple[float, ...]) -> int:
    _banner("method comparison", f"seeds {config.seeds}, σ ∈ {list(sigmas)}")
    table, results = await run_compare(config, sigmas, progress_callback=on_progress)
    print()
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    print()
    return 0 if all(results.values()) else 1


def cmd_plot(run_dir: str) -> int:
    try:
        paths = plot_directory(run_dir)
    except FileNotFoundError as e:
        print(f"  [!] {e}")
        return 1
    for path in paths:
        print(f"  wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcil", description="Federated class-incremental learning lab")
    parser.add_argument("--verbose", "-v", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run every seed of one configuration")
    run.add_argument("--config", help="Flat JSON config (default: desk profile)")
    run.add_argument("--method", choices=["ecoral", "replay", "lwf", "ewc"])
    run.add_argument("--seed", type=int, help="Run this single seed instead of the config's seeds")
    run.add_argument("--out", help="Output directory")

    ablation = sub.add_parser("ablation", help="Replay plus the cumulative A/G/F/C/K ladder")
    ablation.add_argument("--config")
    ablation.add_argument("--out")

    compare = sub.add_parser("compare", help="Every method across non-IID levels")
    compare.add_argument("--config")
    compare.add_argument("--out")
    compare.add_argument("--sigmas", type=float, nargs="+", default=list(DEFAULT_SIGMAS))

    plot = sub.add_parser("plot", help="Emit figures for a seed, run or study directory")
    plot.add_argument("--run", required=True, dest="run_dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    if args.command == "plot":
        return cmd_plot(args.run_dir)

    try:
        config = load_config(args.config, _overrides(args))
    except ValidationError as e:
        print(f"Invalid configuration:\n{e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"Cannot read configuration: {e}", file=sys.stderr)
        return 2

    if args.command == "run":
        return asyncio.run(cmd_run(config))
    if args.command == "ablation":
        return asyncio.run(cmd_ablation(config))
    return asyncio.run(cmd_compare(config, tuple(args.sigmas)))


if __name__ == "__main__":
    sys.exit(main())
