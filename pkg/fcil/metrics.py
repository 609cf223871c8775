"""Continual-learning metrics over a lower-triangular accuracy matrix.

R[t][j] is the accuracy on task j's test set after finishing task t (j ≤ t).
All functions are pure.
"""

from __future__ import annotations

import numpy as np

from fcil.models import AccuracyMatrix, MetricReport


class IncompleteMatrixError(ValueError):
    """Raised when a metric needs more of the accuracy matrix than is present."""


def _require_complete(matrix: AccuracyMatrix) -> None:
    if matrix.T < 1 or not matrix.complete:
        raise IncompleteMatrixError(
            f"expected {matrix.T} lower-triangular rows, got row lengths {[len(r) for r in matrix.rows]}"
        )


def _require_transfer(matrix: AccuracyMatrix) -> None:
    _require_complete(matrix)
    if matrix.T < 2:
        raise IncompleteMatrixError("transfer metrics need at least two tasks")


def overall_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """Sample-weighted accuracy over the test sets of tasks 0..t at time t."""
    sizes = np.asarray(matrix.test_sizes[: t + 1], dtype=np.float64)
    return float(np.dot(sizes, matrix.rows[t]) / sizes.sum())


def accuracy_pair(matrix: AccuracyMatrix) -> tuple[float, float]:
    """(A_avg, A_last)."""
    _require_complete(matrix)
    overall = [overall_accuracy(matrix, t) for t in range(matrix.T)]
    return float(np.mean(overall)), overall[-1]


def incremental_accuracy(matrix: AccuracyMatrix) -> tuple[float, float]:
    """(A_incre_avg, A_incre_last): running mean of the time-wise overall accuracy."""
    _require_complete(matrix)
    overall = np.array([overall_accuracy(matrix, t) for t in range(matrix.T)])
    running = np.cumsum(overall) / np.arange(1, matrix.T + 1)
    return float(running.mean()), float(running[-1])


def accuracy_a(matrix: AccuracyMatrix) -> tuple[float, float]:
    """(Aa_avg, Aa_last): like accuracy_pair but every task weighs the same."""
    _require_complete(matrix)
    per_time = [float(np.mean(row)) for row in matrix.rows]
    return float(np.mean(per_time)), per_time[-1]


def bwt(matrix: AccuracyMatrix) -> float:
    _require_transfer(matrix)
    T, R = matrix.T, matrix.rows
    return float(np.mean([R[T - 1][i] - R[i][i] for i in range(T - 1)]))


def fwt(matrix: AccuracyMatrix, pretrain: list[float | None], baseline: list[float]) -> float:
    """Mean over tasks i ≥ 1 of (accuracy on task i before training it) − (fresh-init accuracy)."""
    _require_transfer(matrix)
    if len(pretrain) < matrix.T or len(baseline) < matrix.T:
        raise IncompleteMatrixError("pre-training row and baseline must cover every task")
    gaps = []
    for i in range(1, matrix.T):
        if pretrain[i] is None:
            raise IncompleteMatrixError(f"no pre-training accuracy recorded for task {i}")
        gaps.append(pretrain[i] - baseline[i])
    return float(np.mean(gaps))


def remembering(bwt_value: float) -> float:
    return float(np.clip(1.0 - abs(min(bwt_value, 0.0)), 0.0, 1.0))


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean over j < T−1 of (best accuracy ever reached on task j) − (final accuracy on j)."""
    _require_transfer(matrix)
    T, R = matrix.T, matrix.rows
    drops = [max(R[l][j] for l in range(j, T)) - R[T - 1][j] for j in range(T - 1)]
    return float(np.mean(drops))


def compute_metrics(
    matrix: AccuracyMatrix,
    pretrain: list[float | None] | None = None,
    baseline: list[float] | None = None,
) -> MetricReport:
    """Full suite; transfer metrics are None for single-task runs or without a pre-training row."""
    a_avg, a_last = accuracy_pair(matrix)
    inc_avg, inc_last = incremental_accuracy(matrix)
    aa_avg, aa_last = accuracy_a(matrix)
    report = MetricReport(
        A_avg=a_avg,
        A_last=a_last,
        A_incre_avg=inc_avg,
        A_incre_last=inc_last,
        Aa_avg=aa_avg,
        Aa_last=aa_last,
    )
    if matrix.T < 2:
        return report
    b = bwt(matrix)
    report.BwT = b
    report.Remembering = remembering(b)
    report.Forgetting = forgetting(matrix)
    if pretrain is not None and baseline is not None:
        report.FwT = fwt(matrix, pretrain, baseline)
    return report
