"""Per-seed run directory persistence.

Output structure:
    <output_dir>/<run_name>/seed_<seed>/
        config.json
        accuracy_matrix.csv          task_0..task_{T-1}, empty cells above the diagonal
        pretrain_accuracy.csv        task, pretrain_accuracy, random_baseline
        metrics.json
        loss_trace_client_<id>.csv   step, l_cond, l_rel, l_mkcl, l_total
        round_reports.jsonl
        partition_counts.csv         task, client_id, class_id, count
        heterogeneity.json
        memory/client_<id>/{manifest.json, exemplars.bin}
        checkpoint.bin
        summary.md
        run_metadata.json
        error.json                   only when the seed aborted
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader

from fcil.data.codec import write_tensor_file
from fcil.models import (
    AccuracyMatrix,
    CondenseReport,
    ExperimentConfig,
    HeterogeneityReport,
    MetricReport,
    RoundReport,
)

_TEMPLATES = Path(__file__).resolve().parent.parent / "templates"

REQUIRED_ARTIFACTS = ("config.json", "accuracy_matrix.csv", "metrics.json", "run_metadata.json")


class RunWriter:
    """Writes one seed's artifacts into its own directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def _now_iso(self) -> str:
        return datetime.now(timezone.utc).isoformat()

    # ── Inputs ───────────────────────────────────────────────────────────

    def write_config(self, config: ExperimentConfig, seed: int) -> Path:
        """Snapshot the config with `seeds` narrowed to this seed, so the directory re-runs as-is."""
        snapshot = config.model_copy(update={"seeds": [seed]}).model_dump(mode="json")
        path = self.run_dir / "config.json"
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8")
        return path

    def write_partition_counts(self, counts: list[dict]) -> Path:
        df = pd.DataFrame(counts, columns=["task", "client_id", "class_id", "count"])
        path = self.run_dir / "partition_counts.csv"
        df.to_csv(path, index=False)
        return path

    # ── Evaluation ───────────────────────────────────────────────────────

    def write_matrix(self, matrix: AccuracyMatrix) -> Path:
        T = matrix.T
        grid = np.full((len(matrix.rows), T), np.nan)
        for t, row in enumerate(matrix.rows):
            grid[t, : len(row)] = row
        df = pd.DataFrame(grid, columns=[f"task_{j}" for j in range(T)])
        path = self.run_dir / "accuracy_matrix.csv"
        df.to_csv(path, index=False, float_format="%.6f")
        return path

    def write_pretrain(self, pretrain: list[float | None], baseline: list[float]) -> Path:
        df = pd.DataFrame(
            {
                "task": list(range(len(baseline))),
                "pretrain_accuracy": pretrain[: len(baseline)],
                "random_baseline": baseline,
            }
        )
        path = self.run_dir / "pretrain_accuracy.csv"
        df.to_csv(path, index=False, float_format="%.6f")
        return path

    def write_metrics(self, metrics: MetricReport) -> Path:
        path = self.run_dir / "metrics.json"
        path.write_text(metrics.model_dump_json(indent=2), encoding="utf-8")
        return path

    # ── Training traces ──────────────────────────────────────────────────

    def write_loss_trace(self, client_id: int, trace: list[CondenseReport]) -> Path:
        columns = list(CondenseReport.model_fields)
        df = pd.DataFrame([r.model_dump() for r in trace], columns=columns)
        path = self.run_dir / f"loss_trace_client_{client_id}.csv"
        df.to_csv(path, index=False)
        return path

    def write_round_reports(self, reports: list[RoundReport]) -> Path:
        path = self.run_dir / "round_reports.jsonl"
        path.write_text("".join(r.model_dump_json() + "\n" for r in reports), encoding="utf-8")
        return path

    def write_heterogeneity(self, reports: list[HeterogeneityReport]) -> Path:
        path = self.run_dir / "heterogeneity.json"
        payload = [{"task": t, **r.model_dump()} for t, r in enumerate(reports)]
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    def write_checkpoint(self, header: dict, tensors: dict) -> Path:
        return write_tensor_file(self.run_dir / "checkpoint.bin", header, tensors)

    def memory_dir(self, client_id: int) -> Path:
        return self.run_dir / "memory" / f"client_{client_id}"

    # ── Results ──────────────────────────────────────────────────────────

    def write_summary(self, context: dict) -> Path:
        env = Environment(loader=FileSystemLoader(_TEMPLATES), keep_trailing_newline=True)
        content = env.get_template("summary.md.j2").render(**context)
        path = self.run_dir / "summary.md"
        path.write_text(content, encoding="utf-8")
        return path

    def write_error(self, stage: str, errors: list[str]) -> Path:
        path = self.run_dir / "error.json"
        payload = {"stage": stage, "errors": errors, "failed_at": self._now_iso()}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    # ── Metadata ─────────────────────────────────────────────────────────

    def write_run_metadata(
        self,
        run_id: str = "",
        seed: int = 0,
        started_at: str = "",
        errors: list[str] | None = None,
        test_sizes: list[int] | None = None,
    ) -> Path:
        all_files = [p for p in self.run_dir.rglob("*") if p.is_file()]
        metadata = {
            "run_id": run_id,
            "seed": seed,
            "started_at": started_at,
            "completed_at": self._now_iso(),
            "file_count": len(all_files) + 1,
            "loss_trace_count": sum(1 for f in all_files if f.name.startswith("loss_trace_client_")),
            "memory_snapshot_count": sum(1 for f in all_files if f.name == "manifest.json"),
            "test_sizes": test_sizes,
            "errors": errors or [],
        }
        path = self.run_dir / "run_metadata.json"
        path.write_text(json.dumps(metadata, indent=2), encoding="utf-8")
        return path


def validate_run_dir(run_dir: str | Path) -> list[str]:
    """Return the problems found in a seed directory; an empty list means complete."""
    root = Path(run_dir)
    problems = [f"missing {name}" for name in REQUIRED_ARTIFACTS if not (root / name).exists()]
    if not list(root.glob("loss_trace_client_*.csv")):
        problems.append("missing loss traces")
    matrix_path = root / "accuracy_matrix.csv"
    if matrix_path.exists():
        df = pd.read_csv(matrix_path)
        T = df.shape[1]
        if df.shape[0] != T:
            problems.append(f"accuracy matrix has {df.shape[0]} rows for {T} tasks")
        else:
            for t in range(T):
                row = df.iloc[t]
                if row.iloc[: t + 1].isna().any() or row.iloc[t + 1 :].notna().any():
                    problems.append(f"accuracy matrix row {t} is not lower-triangular")
    if (root / "error.json").exists():
        problems.append("seed aborted (error.json present)")
    return problems
