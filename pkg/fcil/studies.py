"""Multi-run studies: the component ablation ladder and the method × σ comparison.

Each study runs every configuration through `run_seeds`, reduces the seeds to
means, and writes a CSV table plus comparison plots next to the run directories.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from fcil.graph import run_label, run_seeds, seed_failed
from fcil.metrics import overall_accuracy
from fcil.models import (
    AccuracyMatrix,
    EcoralComponents,
    ExperimentConfig,
    ExperimentProgress,
    ExperimentState,
    MetricReport,
)
from fcil.plots import plot_accuracy_curves, plot_final_per_task, plot_metric_bars
from fcil.stages.report import emit_seed_plots, read_matrix

logger = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.2, 0.5, 0.8)
METHODS = ("ecoral", "replay", "lwf", "ewc")

# Cumulative component ladder: A, AG, AGF, AGFC, AGFCK
LADDER = ("adjustable_memory", "gradient_matching", "feature_matching", "compensation", "contrastive")


@dataclass
class SeedOutcome:
    seed: int
    matrix: AccuracyMatrix
    metrics: MetricReport


def outcomes_from_states(states: list[ExperimentState]) -> list[SeedOutcome]:
    """Completed seeds only; aborted ones are logged and left out of the means."""
    outcomes = []
    for state in states:
        if seed_failed(state):
            logger.warning(f"Seed {state['seed']} excluded from study means: {state.get('errors', [])}")
            continue
        outcomes.append(SeedOutcome(state["seed"], state["matrix"], state["metrics"]))
    return outcomes


def outcomes_from_dir(run_root: str | Path) -> list[SeedOutcome]:
    """Read every complete `seed_<n>/` directory under a run directory."""
    outcomes = []
    for seed_dir in sorted(Path(run_root).glob("seed_*")):
        metrics_path = seed_dir / "metrics.json"
        if not metrics_path.exists() or (seed_dir / "error.json").exists():
            continue
        metrics = MetricReport.model_validate(json.loads(metrics_path.read_text(encoding="utf-8")))
        seed = int(seed_dir.name.removeprefix("seed_"))
        outcomes.append(SeedOutcome(seed, read_matrix(seed_dir), metrics))
    return outcomes


# ---------------------------------------------------------------------------
# Seed reductions
# ---------------------------------------------------------------------------


def mean_metrics(outcomes: list[SeedOutcome]) -> MetricReport:
    """Field-wise mean over seeds; a transfer metric stays None if any seed lacks it."""
    if not outcomes:
        raise ValueError("no completed seeds to average")
    merged: dict[str, float | None] = {}
    for name in MetricReport.model_fields:
        values = [getattr(o.metrics, name) for o in outcomes]
        merged[name] = None if any(v is None for v in values) else float(np.mean(values))
    return MetricReport(**merged)


def mean_curve(outcomes: list[SeedOutcome]) -> list[float]:
    """Overall accuracy after each task, averaged over seeds."""
    curves = np.array([[overall_accuracy(o.matrix, t) for t in range(o.matrix.T)] for o in outcomes])
    return curves.mean(axis=0).tolist()


def mean_final_row(outcomes: list[SeedOutcome]) -> list[float]:
    return np.array([o.matrix.rows[-1] for o in outcomes]).mean(axis=0).tolist()


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


def ablation_configs(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """Replay baseline plus the five cumulative ECoral rungs."""
    configs = {"replay": base.model_copy(update={"method": "replay"})}
    for depth in range(1, len(LADDER) + 1):
        toggles = {name: i < depth for i, name in enumerate(LADDER)}
        components = EcoralComponents(**toggles)
        configs[components.label()] = base.model_copy(update={"method": "ecoral", "components": components})
    return configs


def compare_configs(
    base: ExperimentConfig, sigmas: tuple[float, ...] = DEFAULT_SIGMAS, methods: tuple[str, ...] = METHODS
) -> dict[tuple[str, float], ExperimentConfig]:
    return {
        (method, sigma): base.model_copy(
            update={"method": method, "sigma": sigma, "components": EcoralComponents()}
        )
        for sigma in sigmas
        for method in methods
    }


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def ablation_table(results: dict[str, list[SeedOutcome]], reference: str = "replay") -> pd.DataFrame:
    """A_avg / A_last per rung (in %), with Δ against the reference row."""
    rows = []
    for label, outcomes in results.items():
        if not outcomes:
            continue
        m = mean_metrics(outcomes)
        rows.append({"run": label, "seeds": len(outcomes), "A_avg": 100 * m.A_avg, "A_last": 100 * m.A_last})
    df = pd.DataFrame(rows, columns=["run", "seeds", "A_avg", "A_last"])
    if reference in set(df["run"]):
        ref = df.loc[df["run"] == reference].iloc[0]
        df["delta_A_avg"] = df["A_avg"] - ref["A_avg"]
        df["delta_A_last"] = df["A_last"] - ref["A_last"]
    else:
        logger.warning(f"Reference run '{reference}' has no completed seeds; Δ columns omitted")
    return df


def compare_table(results: dict[tuple[str, float], list[SeedOutcome]], reference: str = "ecoral") -> pd.DataFrame:
    """One row per method, A_avg / A_last per σ, with Δ columns relative to the reference method."""
    records = []
    for (method, sigma), outcomes in results.items():
        if not outcomes:
            continue
        m = mean_metrics(outcomes)
        records.append({"method": method, "sigma": sigma, "A_avg": 100 * m.A_avg, "A_last": 100 * m.A_last})
    long = pd.DataFrame(records, columns=["method", "sigma", "A_avg", "A_last"])
    if long.empty:
        return long

    ref = long[long["method"] == reference].set_index("sigma")[["A_avg", "A_last"]]
    long = long.join(ref, on="sigma", rsuffix="_ref")
    long["delta_A_avg"] = long["A_avg"] - long["A_avg_ref"]
    long["delta_A_last"] = long["A_last"] - long["A_last_ref"]

    table = long.pivot_table(
        index="method", columns="sigma", values=["A_avg", "A_last", "delta_A_avg", "delta_A_last"], sort=True
    )
    table.columns = [f"{value}@{sigma:g}" for value, sigma in table.columns]
    return table.reset_index()


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def emit_study_plots(results: dict[str, list[SeedOutcome]], out_dir: str | Path, title: str = "") -> list[Path]:
    """Accuracy curves, final per-task accuracy and transfer metrics for every run label."""
    completed = {label: outcomes for label, outcomes in results.items() if outcomes}
    if not completed:
        logger.warning("No completed runs to plot")
        return []
    out = Path(out_dir)
    return [
        plot_accuracy_curves(
            {label: mean_curve(o) for label, o in completed.items()}, out / "accuracy_curves.png", title
        ),
        plot_final_per_task({label: mean_final_row(o) for label, o in completed.items()}, out / "final_per_task.png"),
        plot_metric_bars({label: mean_metrics(o) for label, o in completed.items()}, out / "metrics.png"),
    ]


# ---------------------------------------------------------------------------
# Study runners
# ---------------------------------------------------------------------------


async def run_ablation(
    base: ExperimentConfig,
    output_root: str | Path | None = None,
    progress_callback: Callable[[ExperimentProgress], Any] | None = None,
) -> tuple[pd.DataFrame, dict[str, list[SeedOutcome]]]:
    root = Path(output_root or base.output_dir) / "ablation"
    results: dict[str, list[SeedOutcome]] = {}
    for label, config in ablation_configs(base).items():
        logger.info(f"Ablation rung {label}")
        states = await run_seeds(config, root, run_name=label, progress_callback=progress_callback)
        results[label] = outcomes_from_states(states)

    root.mkdir(parents=True, exist_ok=True)
    table = ablation_table(results)
    table.to_csv(root / "ablation.csv", index=False, float_format="%.4f")
    emit_study_plots(results, root, title="Component ablation")
    return table, results


async def run_compare(
    base: ExperimentConfig,
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS,
    output_root: str | Path | None = None,
    progress_callback: Callable[[ExperimentProgress], Any] | None = None,
) -> tuple[pd.DataFrame, dict[tuple[str, float], list[SeedOutcome]]]:
    root = Path(output_root or base.output_dir) / "compare"
    results: dict[tuple[str, float], list[SeedOutcome]] = {}
    for (method, sigma), config in compare_configs(base, sigmas).items():
        name = f"sigma_{sigma:g}/{run_label(config)}"
        logger.info(f"Comparison run {name}")
        states = await run_seeds(config, root, run_name=name, progress_callback=progress_callback)
        results[(method, sigma)] = outcomes_from_states(states)

    table = compare_table(results)
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / "compare.csv", index=False, float_format="%.4f")
    for sigma in sigmas:
        per_sigma = {method: o for (method, s), o in results.items() if s == sigma}
        emit_study_plots(per_sigma, root / f"sigma_{sigma:g}", title=f"σ = {sigma:g}")
    return table, results


def plot_directory(path: str | Path) -> list[Path]:
    """Plot whatever `path` holds: a seed directory, a run of seed_* directories, or a study of runs."""
    root = Path(path)
    if (root / "accuracy_matrix.csv").exists():
        return emit_seed_plots(root, root.parent.name or "run")

    seed_dirs = sorted(root.glob("seed_*"))
    if seed_dirs:
        paths = []
        for seed_dir in seed_dirs:
            if (seed_dir / "accuracy_matrix.csv").exists():
                paths.extend(emit_seed_plots(seed_dir, root.name))
        paths.extend(emit_study_plots({root.name: outcomes_from_dir(root)}, root, title=root.name))
        return paths

    runs = {d.name: outcomes_from_dir(d) for d in sorted(root.iterdir()) if d.is_dir() and any(d.glob("seed_*"))}
    if not runs:
        raise FileNotFoundError(f"No run directories under {root}")
    return emit_study_plots(runs, root, title=root.name)
