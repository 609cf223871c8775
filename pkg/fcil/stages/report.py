"""Stages 4 and 5: persist the run directory, then render the summary and plots.

Also hosts the failure sink every stage routes to once an error is recorded.
"""

from __future__ import annotations

import asyncio
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from fcil.data.run_writer import RunWriter
from fcil.memory.store import save_snapshot
from fcil.metrics import overall_accuracy
from fcil.models import AccuracyMatrix, ExperimentState, MetricReport, RunArtifacts
from fcil.nets.params import ParamVector
from fcil.plots import plot_accuracy_curves, plot_partition_heatmap

logger = logging.getLogger(__name__)


def write_run(state: ExperimentState) -> RunArtifacts:
    config, seed = state["config"], state["seed"]
    writer = RunWriter(state["run_dir"])

    config_path = writer.write_config(config, seed)
    matrix_path = writer.write_matrix(state["matrix"])
    pretrain_path = writer.write_pretrain(state["pretrain_accuracy"], state["random_baseline"])
    metrics_path = writer.write_metrics(state["metrics"])
    partition_path = writer.write_partition_counts(state.get("partition_counts", []))
    rounds_path = writer.write_round_reports(state.get("round_reports", []))
    heterogeneity_path = writer.write_heterogeneity(state.get("heterogeneity", []))
    traces = [
        str(writer.write_loss_trace(cid, trace)) for cid, trace in sorted(state.get("loss_traces", {}).items())
    ]

    for cid, client in sorted(state.get("clients", {}).items()):
        if client.store is not None:
            save_snapshot(client.store, writer.memory_dir(cid))

    checkpoint_path = None
    global_state = state.get("global_state")
    if global_state is not None:
        tensors = {f"classifier.{n}": t for n, t in global_state.classifier.params}
        vae_classes = None
        if global_state.vae is not None:
            tensors.update({f"vae.{n}": t for n, t in ParamVector.from_module(global_state.vae)})
            vae_classes = global_state.vae.classes
        header = {
            "seed": seed,
            "task": global_state.task,
            "round": global_state.round,
            "head_classes": global_state.classifier.head_classes,
            "vae_classes": vae_classes,
        }
        checkpoint_path = str(writer.write_checkpoint(header, tensors))

    return RunArtifacts(
        run_dir=str(writer.run_dir),
        config_path=str(config_path),
        matrix_path=str(matrix_path),
        pretrain_path=str(pretrain_path),
        metrics_path=str(metrics_path),
        loss_trace_paths=traces,
        round_reports_path=str(rounds_path),
        partition_path=str(partition_path),
        heterogeneity_path=str(heterogeneity_path),
        checkpoint_path=checkpoint_path,
    )


async def write_artifacts_node(state: ExperimentState) -> dict:
    """Persist every artifact of this seed.

    Writes: artifacts
    """
    try:
        artifacts = await asyncio.to_thread(write_run, state)
    except Exception as e:
        logger.error(f"Seed {state['seed']}: writing artifacts failed: {e}")
        return {"errors": [f"Artifacts: {e}"], "current_stage": "artifacts"}
    return {
        "artifacts": artifacts,
        "current_stage": "artifacts",
        "progress_messages": [f"Wrote artifacts to {artifacts.run_dir}"],
    }


# ---------------------------------------------------------------------------
# Summary and plots
# ---------------------------------------------------------------------------


def summary_context(state: ExperimentState) -> dict:
    config = state["config"]
    metrics: MetricReport | None = state.get("metrics")
    heterogeneity = []
    for t, report in enumerate(state.get("heterogeneity", [])):
        kls = list(report.pairwise_kl.values())
        heterogeneity.append(
            {"task": t, "mean_kl": float(np.mean(kls)) if kls else None, "delta_loss": report.delta_loss}
        )
    return {
        "title": f"{config.method} run, seed {state['seed']}",
        "config": config,
        "components": config.components.label() if config.method == "ecoral" else "-",
        "seed": state["seed"],
        "matrix": state.get("matrix") or AccuracyMatrix(),
        "metrics": metrics.model_dump() if metrics is not None else {},
        "heterogeneity": heterogeneity,
        "errors": state.get("errors", []),
    }


def emit_seed_plots(run_dir: str | Path, label: str) -> list[Path]:
    """Accuracy curve and final-task partition heatmap for one seed directory."""
    root = Path(run_dir)
    matrix = read_matrix(root)
    paths = [
        plot_accuracy_curves(
            {label: [overall_accuracy(matrix, t) for t in range(matrix.T)]}, root / "accuracy_curve.png"
        )
    ]
    counts_path = root / "partition_counts.csv"
    if counts_path.exists():
        counts = pd.read_csv(counts_path)
        if not counts.empty:
            paths.append(plot_partition_heatmap(counts, root / "partition_heatmap.png"))
    return paths


def read_matrix(run_dir: str | Path) -> AccuracyMatrix:
    """Rebuild an AccuracyMatrix (with test sizes) from a seed directory."""
    root = Path(run_dir)
    df = pd.read_csv(root / "accuracy_matrix.csv")
    rows = [[float(v) for v in df.iloc[t, : t + 1]] for t in range(df.shape[0])]
    sizes_path = root / "run_metadata.json"
    sizes = None
    if sizes_path.exists():
        sizes = json.loads(sizes_path.read_text(encoding="utf-8")).get("test_sizes")
    return AccuracyMatrix(rows=rows, test_sizes=sizes or [1] * df.shape[1])


async def emit_report_node(state: ExperimentState) -> dict:
    """Render summary.md and the per-seed plots, then close the run metadata.

    Writes: artifacts (summary and plot paths)
    """
    writer = RunWriter(state["run_dir"])
    artifacts: RunArtifacts = state["artifacts"]
    errors: list[str] = []

    summary: str | None = None
    plot_paths: list[str] = []
    try:
        summary = str(await asyncio.to_thread(writer.write_summary, summary_context(state)))
        plot_paths = [str(p) for p in await asyncio.to_thread(emit_seed_plots, writer.run_dir, state["config"].method)]
    except Exception as e:
        logger.warning(f"Seed {state['seed']}: report incomplete: {e}")
        errors.append(f"Report: {e}")
    writer.write_run_metadata(
        run_id=state.get("run_id", ""),
        seed=state["seed"],
        started_at=state.get("started_at", ""),
        errors=state.get("errors", []) + errors,
        test_sizes=state["matrix"].test_sizes,
    )

    return {
        "artifacts": artifacts.model_copy(update={"summary_path": summary, "plot_paths": plot_paths}),
        "errors": errors,
        "current_stage": "complete",
        "progress_messages": [f"Report written to {summary}"],
    }


async def record_failure_node(state: ExperimentState) -> dict:
    """Write error.json (and whatever metadata exists) for an aborted seed."""
    writer = RunWriter(state["run_dir"])
    stage = state.get("current_stage", "unknown")
    writer.write_config(state["config"], state["seed"])
    path = writer.write_error(stage, state.get("errors", []))
    writer.write_run_metadata(
        run_id=state.get("run_id", ""),
        seed=state["seed"],
        started_at=state.get("started_at", ""),
        errors=state.get("errors", []),
    )
    return {"current_stage": "error", "progress_messages": [f"Seed aborted at {stage}; see {path}"]}
