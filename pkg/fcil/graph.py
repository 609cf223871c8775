"""LangGraph StateGraph orchestration of one seed's experiment.

  prepare_stream → train_stream → score_metrics → write_artifacts → emit_report → END

Every stage routes to record_failure instead once the state carries an error,
so an aborted seed still leaves config.json, error.json and run_metadata.json.
"""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from langgraph.graph import END, START, StateGraph

from fcil.models import ExperimentConfig, ExperimentProgress, ExperimentState, initial_state
from fcil.stages.evaluate import score_metrics_node
from fcil.stages.prepare import prepare_stream_node
from fcil.stages.report import emit_report_node, record_failure_node, write_artifacts_node
from fcil.stages.train import train_stream_node

logger = logging.getLogger(__name__)

_STAGE_ORDER = ["prepare_stream", "train_stream", "score_metrics", "write_artifacts", "emit_report"]


def _next_or_failure(next_node: str) -> Callable[[ExperimentState], str]:
    def route(state: ExperimentState) -> str:
        return "record_failure" if state.get("errors") else next_node

    return route


def create_pipeline() -> Any:
    """Build and compile the per-seed pipeline."""
    graph = StateGraph(ExperimentState)

    graph.add_node("prepare_stream", prepare_stream_node)
    graph.add_node("train_stream", train_stream_node)
    graph.add_node("score_metrics", score_metrics_node)
    graph.add_node("write_artifacts", write_artifacts_node)
    graph.add_node("emit_report", emit_report_node)
    graph.add_node("record_failure", record_failure_node)

    graph.add_edge(START, "prepare_stream")
    for node, next_node in zip(_STAGE_ORDER, _STAGE_ORDER[1:]):
        graph.add_conditional_edges(
            node, _next_or_failure(next_node), {next_node: next_node, "record_failure": "record_failure"}
        )

    # Plotting problems in emit_report are recorded but never abort a finished seed
    graph.add_edge("emit_report", END)
    graph.add_edge("record_failure", END)

    return graph.compile()


# Pre-compiled pipeline instance
pipeline = create_pipeline()

# Node name mapping for progress updates
_NODE_META: dict[str, dict[str, Any]] = {
    "prepare_stream":  {"stage": "prepare",   "pct": 10},
    "train_stream":    {"stage": "train",     "pct": 75},
    "score_metrics":   {"stage": "metrics",   "pct": 85},
    "write_artifacts": {"stage": "artifacts", "pct": 95},
    "emit_report":     {"stage": "report",    "pct": 100},
    "record_failure":  {"stage": "error",     "pct": 100},
}


def run_label(config: ExperimentConfig) -> str:
    """Directory name of a configuration: the method, plus the component ladder for ECoral."""
    if config.method == "ecoral":
        return f"ecoral-{config.components.label()}"
    if config.condense_memory:
        return f"{config.method}-condensed"
    return config.method


async def _notify(progress_callback: Callable[[ExperimentProgress], Any] | None, progress: ExperimentProgress):
    if progress_callback is None:
        return
    result = progress_callback(progress)
    # Await if callback is async
    if hasattr(result, "__await__"):
        await result


async def run_experiment(
    config: ExperimentConfig,
    seed: int,
    run_dir: str | Path,
    progress_callback: Callable[[ExperimentProgress], Any] | None = None,
    run_id: str = "",
) -> ExperimentState:
    """Run the full pipeline for one seed.

    Args:
        config: Validated experiment configuration
        seed: Master seed of this run
        run_dir: Directory receiving this seed's artifacts
        progress_callback: Optional async/sync callback for progress updates
        run_id: Identifier carried in progress messages and run_metadata.json

    Returns:
        Final ExperimentState with all results
    """
    started_at = datetime.now(timezone.utc).isoformat()
    state = initial_state(config, seed, str(run_dir), run_id=run_id, started_at=started_at)
    final_state = state

    async for event in pipeline.astream(state, stream_mode="updates"):
        for node_name, node_output in event.items():
            # Merge node output into running state, respecting
            # operator.add reducers for list fields (errors, progress_messages)
            if isinstance(node_output, dict):
                for key, value in node_output.items():
                    if key in ("errors", "progress_messages") and isinstance(value, list):
                        final_state[key] = final_state.get(key, []) + value
                    else:
                        final_state[key] = value

            if node_name in _NODE_META:
                meta = _NODE_META[node_name]
                messages = node_output.get("progress_messages", []) if isinstance(node_output, dict) else []
                message = messages[-1] if messages else f"Completed {node_name}"
                await _notify(
                    progress_callback,
                    ExperimentProgress(run_id=run_id, stage=meta["stage"], message=message, progress_pct=meta["pct"]),
                )

    failed = final_state.get("current_stage") == "error"
    if failed:
        logger.warning(f"Seed {seed} aborted: {final_state.get('errors', [])}")
    await _notify(
        progress_callback,
        ExperimentProgress(
            run_id=run_id,
            stage="error" if failed else "complete",
            message=f"Seed {seed} {'aborted' if failed else 'complete'}",
            progress_pct=100,
        ),
    )
    return final_state


async def run_seeds(
    config: ExperimentConfig,
    output_root: str | Path | None = None,
    run_name: str | None = None,
    progress_callback: Callable[[ExperimentProgress], Any] | None = None,
) -> list[ExperimentState]:
    """Run every seed of `config` into `<output_root>/<run_name>/seed_<seed>/`.

    Seeds run one after another unless `config.parallel_seeds` is set; an
    aborted seed never stops the others.
    """
    root = Path(output_root or config.output_dir)
    name = run_name or run_label(config)

    def job(seed: int):
        return run_experiment(
            config,
            seed,
            root / name / f"seed_{seed}",
            progress_callback=progress_callback,
            run_id=f"{name}/seed_{seed}",
        )

    if config.parallel_seeds:
        return list(await asyncio.gather(*(job(seed) for seed in config.seeds)))

    states = []
    for seed in config.seeds:
        states.append(await job(seed))
    return states


def seed_failed(state: ExperimentState) -> bool:
    return state.get("current_stage") == "error" or state.get("metrics") is None
